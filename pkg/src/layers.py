import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, leaky_relu, matmul, mul, tanh

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


class MLP:
    """Dense layers with leaky-ReLU between them and an optional tanh head"""

    def __init__(self, name: str, weights: List[Tensor], biases: List[Tensor],
                 slope: float = LEAKY_SLOPE, output: Optional[str] = None, output_scale: float = 1.0):
        if len(weights) != len(biases) or not weights:
            raise ValueError(f"{name}: need one bias per weight matrix")
        self.name = name
        self.weights = weights
        self.biases = biases
        self.slope = slope
        self.output = output
        self.output_scale = output_scale

    @classmethod
    def init(cls, name: str, sizes: Sequence[int], rng: np.random.Generator,
             zero_last: bool = False, **kwargs) -> 'MLP':
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            # He-style scale for leaky-ReLU inputs
            std = np.sqrt(2.0 / ((1.0 + LEAKY_SLOPE ** 2) * fan_in))
            w = rng.standard_normal((fan_in, fan_out)) * std
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            weights.append(Tensor(w))
            biases.append(Tensor(np.zeros((1, fan_out))))
        return cls(name, weights, biases, **kwargs)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_names(self) -> List[str]:
        return [f"{self.name}.{i}" for i in range(len(self.weights))]

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict()
        for layer, w, b in zip(self.layer_names, self.weights, self.biases):
            params[f"{layer}.weight"] = w
            params[f"{layer}.bias"] = b
        return params

    def load(self, params: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.parameters().items():
            value = np.asarray(params[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != expected {tensor.shape}")
            tensor.data[...] = value

    def copy(self) -> 'MLP':
        return MLP(self.name, [Tensor(w.data) for w in self.weights], [Tensor(b.data) for b in self.biases],
                   slope=self.slope, output=self.output, output_scale=self.output_scale)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected input of shape (batch, {self.in_features}), got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = matmul(h, w) + b
            if i < last:
                h = leaky_relu(h, self.slope)
        if self.output == 'tanh':
            h = tanh(h)
            if self.output_scale != 1.0:
                h = mul(h, self.output_scale)
        return h
