"""
Latent-code search that reconstructs given samples through the frozen generator.

invert_y optimizes the code fed straight to g; invert_z optimizes the prior code
and decodes through phi^-1 first. Both use Adam with a rollback guard: after
ROLLBACK_PATIENCE consecutive increases the search returns to the best code seen
so far, halves the learning rate and restarts the moments. The returned latent
is always the best code, so the final loss never exceeds the initial one.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
import pandas as pd

from config import Config
from .coupling import coupling_forward, coupling_inverse
from .losses import recon_loss
from .model import LiaModel, encoder_forward, generator_forward
from .optim import Adam
from .tensor import NonFiniteError, Tape, Tensor

logger = logging.getLogger(__name__)

INIT_MODES = ('random', 'mean', 'encoder')
SPACES = ('y', 'z')
MEAN_LATENT_SAMPLES = 1000


@dataclass
class InversionResult:
    latent: np.ndarray
    loss_curve: List[float]
    space: str
    init_mode: str
    rollbacks: int = 0
    initial_latent: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'step': np.arange(len(self.loss_curve)), 'loss': self.loss_curve})


def _as_batch(x: Union[np.ndarray, Tensor], width: int) -> Tensor:
    values = np.asarray(getattr(x, 'data', x), dtype=np.float32)
    values = values.reshape(-1, width) if values.ndim == 1 or values.size == width else values
    return Tensor(values)


def mean_latent(model: LiaModel, n: int = MEAN_LATENT_SAMPLES, seed: int = Config.SEED) -> Tensor:
    """Average of phi^-1(z) over n Gaussian draws"""
    if n < 1:
        raise ValueError(f"mean_latent: n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((n, model.dims.latent_dim)))
    y = coupling_inverse(model.phi, z)
    return Tensor(y.data.mean(axis=0))


def initial_latent(model: LiaModel, x: Tensor, init_mode: str, seed: int = Config.SEED) -> np.ndarray:
    """Starting y code for each row of x"""
    batch, latent = x.shape[0], model.dims.latent_dim
    if init_mode == 'random':
        rng = np.random.default_rng(seed)
        z = Tensor(rng.standard_normal((batch, latent)))
        return coupling_inverse(model.phi, z).numpy()
    if init_mode == 'mean':
        return np.tile(mean_latent(model, seed=seed).data, (batch, 1))
    if init_mode == 'encoder':
        return encoder_forward(model, x).numpy()
    raise ValueError(f"Unknown init_mode '{init_mode}'; expected one of {INIT_MODES}")


def _safeguarded_descent(objective: Callable[[Tensor], Tensor], start: np.ndarray, steps: int, lr: float,
                         betas=Config.INVERSION_BETAS, patience: int = Config.ROLLBACK_PATIENCE):
    code = Tensor(start)
    optimizer = Adam({'latent': code}, lr, betas=betas)

    def value_and_grad():
        with Tape() as tape:
            tape.watch(code)
            loss = objective(code)
            (grad,) = tape.gradient(loss, [code], create_graph=False)
        return loss.item(), grad

    value, grad = value_and_grad()
    curve = [value]
    best_value, best = value, code.numpy()
    previous, increases, rollbacks = value, 0, 0
    for step in range(steps):
        optimizer.step({'latent': grad})
        try:
            value, grad = value_and_grad()
            failed = False
        except NonFiniteError:
            failed = True
        if not failed and value < best_value:
            best_value, best = value, code.numpy()
        increases = increases + 1 if failed or value > previous else 0
        if failed or increases >= patience:
            code.data[...] = best
            optimizer.lr *= 0.5
            optimizer.reset()
            rollbacks += 1
            increases = 0
            logger.debug(f"Inversion step {step}: rolled back to loss {best_value:.5f}, lr {optimizer.lr:g}")
            value, grad = value_and_grad()
        curve.append(value)
        previous = value
    # the returned code is the best one, so the curve ends on its loss
    curve[-1] = best_value
    return best, curve, rollbacks


def invert_y(model: LiaModel, x, init_mode: str = 'encoder', steps: int = Config.INVERSION_STEPS,
             lr: float = Config.INVERSION_LR, seed: int = Config.SEED, beta1: float = Config.BETA1,
             y0: Optional[np.ndarray] = None) -> InversionResult:
    """argmin_y recon_loss(x, g(y)); y0, when given, replaces the init_mode start"""
    if init_mode not in INIT_MODES:
        raise ValueError(f"Unknown init_mode '{init_mode}'; expected one of {INIT_MODES}")
    x = _as_batch(x, model.dims.data_dim)
    start = initial_latent(model, x, init_mode, seed) if y0 is None else np.asarray(y0, dtype=np.float32).reshape(
        x.shape[0], model.dims.latent_dim)

    def objective(y: Tensor) -> Tensor:
        return recon_loss(x, generator_forward(model, y), model.eps, beta1)

    latent, curve, rollbacks = _safeguarded_descent(objective, start, steps, lr)
    logger.info(f"y-space inversion ({init_mode} init): loss {curve[0]:.5f} -> {curve[-1]:.5f} "
                f"in {steps} steps ({rollbacks} rollbacks)")
    return InversionResult(latent, curve, 'y', init_mode, rollbacks, start.copy())


def invert_z(model: LiaModel, x, y0, steps: int = Config.INVERSION_STEPS, lr: float = Config.INVERSION_LR,
             beta1: float = Config.BETA1, init_mode: str = 'encoder') -> InversionResult:
    """argmin_z recon_loss(x, g(phi^-1(z))) starting from z0 = phi(y0)"""
    x = _as_batch(x, model.dims.data_dim)
    y0 = Tensor(np.asarray(getattr(y0, 'data', y0), dtype=np.float32).reshape(x.shape[0], model.dims.latent_dim))
    start = coupling_forward(model.phi, y0).numpy()

    def objective(z: Tensor) -> Tensor:
        return recon_loss(x, generator_forward(model, coupling_inverse(model.phi, z)), model.eps, beta1)

    latent, curve, rollbacks = _safeguarded_descent(objective, start, steps, lr)
    logger.info(f"z-space inversion ({init_mode} init): loss {curve[0]:.5f} -> {curve[-1]:.5f} "
                f"in {steps} steps ({rollbacks} rollbacks)")
    return InversionResult(latent, curve, 'z', init_mode, rollbacks, start.copy())


def reconstruct(model: LiaModel, result: InversionResult) -> np.ndarray:
    y = Tensor(result.latent)
    if result.space == 'z':
        y = coupling_inverse(model.phi, y)
    return generator_forward(model, y).numpy()
