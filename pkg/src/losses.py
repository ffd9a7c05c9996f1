"""
Training objectives.

Reconstruction uses non-squared L2 distances averaged over the batch. The
critic loss is the Wasserstein gap plus the R1 penalty on real samples, which
needs a second backward pass through the tape, as does the path-length
regularizer on the generator.
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Tuple

from config import Config
from .tensor import ShapeError, Tensor, Tape, current_tape, exp, mean, mul, neg, sqrt, square, sum_

logger = logging.getLogger(__name__)

Critic = Callable[[Tensor], Tensor]
FeatureMap = Callable[[Tensor], Tensor]


@dataclass
class LossWeights:
    beta1: float = Config.BETA1
    beta2: float = Config.BETA2
    gamma: float = Config.GAMMA

    def validate(self) -> None:
        for name in ('beta1', 'beta2', 'gamma'):
            if getattr(self, name) < 0:
                raise ValueError(f"Loss weight {name} must be non-negative, got {getattr(self, name)}")


def _row_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of per-row Euclidean distances"""
    if a.shape != b.shape:
        raise ShapeError(f"recon_loss: shapes {a.shape} and {b.shape} differ")
    return mean(sqrt(sum_(square(a - b), axis=1)))


def recon_loss(x: Tensor, x_tilde: Tensor, eps: FeatureMap, beta1: float) -> Tensor:
    """||x - x~|| + beta1 * ||eps(x) - eps(x~)||"""
    pixel = _row_distance(x, x_tilde)
    if beta1 == 0:
        return pixel
    return pixel + mul(_row_distance(eps(x), eps(x_tilde)), beta1)


def input_gradient(c: Critic, x: Tensor) -> Tensor:
    """grad_x of sum(c(x)), recorded on the tape so it can be differentiated again"""
    tape = current_tape()
    context = nullcontext(tape) if tape is not None and tape.recording else Tape()
    with context as tape:
        tape.watch(x)
        scores = c(x)
        (grad,) = tape.gradient(sum_(scores), [x], create_graph=True)
    return grad


def r1_penalty(c: Critic, x_real: Tensor) -> Tensor:
    """E[||grad_x c(x)||^2] over real samples"""
    grad = input_gradient(c, x_real)
    return mean(sum_(square(grad), axis=1))


def critic_loss(c: Critic, x_real: Tensor, x_fake: Tensor, gamma: float) -> Tensor:
    """E[c(x~)] - E[c(x)] + gamma/2 * E[||grad_x c(x)||^2]"""
    gap = mean(c(x_fake)) - mean(c(x_real))
    if gamma == 0:
        return gap
    return gap + mul(r1_penalty(c, x_real), gamma / 2.0)


def adv_loss(c: Critic, x_tilde: Tensor) -> Tensor:
    return neg(mean(c(x_tilde)))


def path_lengths(g: Callable[[Tensor], Tensor], y: Tensor, noise: Tensor) -> Tensor:
    """Per-row ||J_g(y)^T noise||, recorded so it can be differentiated w.r.t. g's parameters"""
    grad = input_gradient(lambda v: sum_(mul(g(v), noise), axis=1), y)
    return sqrt(sum_(square(grad), axis=1) + 1e-8)


def path_length_penalty(lengths: Tensor, target: float) -> Tensor:
    """E[(length - target)^2]; target is a running mean the caller keeps outside the tape"""
    return mean(square(lengths - target))


def encoder_objective_terms(x: Tensor, x_tilde: Tensor, eps: FeatureMap, c: Critic,
                            weights: LossWeights) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, reconstruction, adversarial)"""
    recon = recon_loss(x, x_tilde, eps, weights.beta1)
    adversarial = adv_loss(c, x_tilde)
    return mul(recon, weights.beta2) + adversarial, recon, adversarial


def encoder_objective(x: Tensor, x_tilde: Tensor, eps: FeatureMap, c: Critic, weights: LossWeights) -> Tensor:
    """beta2 * recon_loss + adv_loss"""
    return encoder_objective_terms(x, x_tilde, eps, c, weights)[0]


def kl_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))"""
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_gaussian: shapes {mu.shape} and {logvar.shape} differ")
    per_dim = square(mu) + exp(logvar) - logvar - 1.0
    return mul(mean(sum_(per_dim, axis=1)), 0.5)
