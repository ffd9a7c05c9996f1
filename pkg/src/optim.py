import logging
from typing import Dict, Optional, Tuple

import numpy as np

from config import Config
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """Adaptive moment estimation over a named parameter map, updated in place"""

    def __init__(self, params: Dict[str, Tensor], lr: float, betas: Tuple[float, float] = Config.ADAM_BETAS,
                 eps: float = Config.ADAM_EPS):
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: Dict[str, Optional[Tensor]]) -> None:
        """Apply one update; parameters missing from grads are left alone"""
        self.t += 1
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1 ** self.t
        correction2 = 1.0 - beta2 ** self.t
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            g = grad.data.astype(param.data.dtype, copy=False)
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            param.data -= update.astype(param.data.dtype, copy=False)
