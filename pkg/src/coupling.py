"""
Additive coupling network between the y-space and the z-space.

Each layer splits a d-vector into a top half t and a bottom half b and adds a
learned function of one half to the other:

    forward:  z_t = y_t,  z_b = y_b + tau(y_t)
    inverse:  y_t = z_t,  y_b = z_b - tau(z_t)

Parity alternates so that both halves get transformed. There is no
log-determinant anywhere: only invertibility is used.
"""

import logging
from collections import OrderedDict
from typing import Dict, List

import numpy as np

from .layers import MLP
from .tensor import ShapeError, Tensor, concat, slice_

logger = logging.getLogger(__name__)


class CouplingLayer:
    def __init__(self, tau: MLP, parity: int, dim: int):
        if dim % 2:
            raise ShapeError(f"Coupling layers need an even dimension, got {dim}")
        self.tau = tau
        self.parity = parity
        self.dim = dim
        self.split = dim // 2

    def _halves(self, v: Tensor):
        return slice_(v, 0, self.split, axis=1), slice_(v, self.split, self.dim, axis=1)

    def forward(self, v: Tensor) -> Tensor:
        top, bottom = self._halves(v)
        if self.parity == 0:
            bottom = bottom + self.tau(top)
        else:
            top = top + self.tau(bottom)
        return concat([top, bottom], axis=1)

    def inverse(self, v: Tensor) -> Tensor:
        top, bottom = self._halves(v)
        if self.parity == 0:
            bottom = bottom - self.tau(top)
        else:
            top = top - self.tau(bottom)
        return concat([top, bottom], axis=1)


class CouplingNet:
    """phi (y -> z) and its exact inverse (z -> y)"""

    def __init__(self, layers: List[CouplingLayer], dim: int):
        for i, layer in enumerate(layers):
            if layer.parity != i % 2:
                raise ValueError(f"Coupling layer {i} has parity {layer.parity}; parities must alternate")
        self.layers = layers
        self.dim = dim

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict()
        for layer in self.layers:
            params.update(layer.tau.parameters())
        return params

    @property
    def layer_names(self) -> List[str]:
        return [name for layer in self.layers for name in layer.tau.layer_names]

    def load(self, params: Dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            layer.tau.load(params)

    def copy(self) -> 'CouplingNet':
        return CouplingNet([CouplingLayer(layer.tau.copy(), layer.parity, layer.dim) for layer in self.layers],
                           self.dim)


def _check_input(net: CouplingNet, v: Tensor, op: str) -> None:
    if net.dim % 2:
        raise ShapeError(f"{op}: coupling dimension must be even, got {net.dim}")
    if v.ndim != 2 or v.shape[1] != net.dim:
        raise ShapeError(f"{op}: expected shape (batch, {net.dim}), got {v.shape}")


def coupling_forward(net: CouplingNet, y: Tensor) -> Tensor:
    """z = phi(y)"""
    _check_input(net, y, 'coupling_forward')
    v = y
    for layer in net.layers:
        v = layer.forward(v)
    return v


def coupling_inverse(net: CouplingNet, z: Tensor) -> Tensor:
    """y = phi^-1(z), layers undone in reverse order"""
    _check_input(net, z, 'coupling_inverse')
    v = z
    for layer in reversed(net.layers):
        v = layer.inverse(v)
    return v


def init_coupling(dim: int, layers: int, hidden: int, seed: int, name: str = 'phi') -> CouplingNet:
    """Deterministic init; every tau ends in a zero layer so phi starts as the identity"""
    if dim % 2:
        raise ShapeError(f"init_coupling: dimension must be even, got {dim}")
    if layers < 1:
        raise ValueError(f"init_coupling: need at least one layer, got {layers}")
    rng = np.random.default_rng(seed)
    half = dim // 2
    built = []
    for i in range(layers):
        tau = MLP.init(f"{name}.{i}.tau", [half, hidden, hidden, half], rng, zero_last=True)
        built.append(CouplingLayer(tau, parity=i % 2, dim=dim))
    logger.debug(f"Initialized coupling net: dim={dim}, layers={layers}, hidden={hidden}, seed={seed}")
    return CouplingNet(built, dim)
