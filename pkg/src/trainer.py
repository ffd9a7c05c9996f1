"""
Two-stage training plus the variational baseline.

Stage 1 trains the decoder path z -> phi^-1 -> g against the critic. Stage 2
freezes phi and g, bypasses phi and trains the encoder f through x -> f -> g
while the critic keeps being fine-tuned at a reduced rate. The baseline swaps f
for a variational encoder whose samples go through phi^-1, which is where its
gradients get noisy.

Frozen modules are never registered on a tape, so they cannot change.
"""

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil

from config import Config
from .datasets import Dataset
from .layers import MLP
from .losses import (LossWeights, adv_loss, critic_loss, encoder_objective_terms, kl_gaussian, path_length_penalty,
                     path_lengths, recon_loss)
from .model import (LiaModel, ModelDims, decode_prior, encoder_forward, feature_forward, generator_forward,
                    init_vae_encoder, vae_encoder_forward)
from .coupling import coupling_inverse
from .optim import Adam
from .storage import write_csv
from .tensor import NonFiniteError, Tape, Tensor, mean, mul, slice_, square

logger = logging.getLogger(__name__)

# Independent random streams per phase, all derived from TrainConfig.seed
STREAM_FEATURES, STREAM_STAGE1, STREAM_STAGE2, STREAM_VAE, STREAM_WARMUP, STREAM_PATH = range(1, 7)
NAN_PATIENCE = 50
SMOOTHING_WINDOW = 200
CODE_DRIFT_LIMIT = 5.0  # mean |y| past which encoded codes have left the prior's range


class TrainingDivergedError(RuntimeError):
    def __init__(self, stage: str, step: int, detail: str = ''):
        self.stage = stage
        self.step = step
        super().__init__(f"{stage} diverged at step {step}" + (f": {detail}" if detail else ''))


def get_memory_usage():
    """Get current memory usage in MB"""
    process = psutil.Process(os.getpid())
    return process.memory_info().rss / 1024 / 1024


@dataclass
class TrainConfig:
    seed: int = Config.SEED
    batch_size: int = Config.BATCH_SIZE
    stage1_steps: int = Config.STAGE1_STEPS_2D
    stage2_steps: int = Config.STAGE2_STEPS
    vae_steps: Optional[int] = None  # defaults to stage2_steps
    lr_g: float = Config.LEARNING_RATE
    lr_d: float = Config.LEARNING_RATE
    lr_e: float = Config.ENCODER_LEARNING_RATE
    finetune_ratio: float = Config.FINETUNE_RATIO
    lr_floor: float = Config.STAGE2_LR_FLOOR
    encoder_warmup_steps: int = Config.ENCODER_WARMUP_STEPS
    pl_weight: Optional[float] = None  # None: Config.PATH_LENGTH_WEIGHT on images, 0 otherwise
    pl_every: int = Config.PATH_LENGTH_EVERY
    weights: LossWeights = field(default_factory=LossWeights)
    dims: ModelDims = field(default_factory=ModelDims)
    dataset: str = 'gaussians'
    log_every: int = Config.LOG_EVERY
    feature_steps: int = Config.FEATURE_PRETRAIN_STEPS
    feature_mode: str = 'pretrained'  # or 'random' for a frozen random eps
    kl_weight: float = 1.0
    noise_scale: float = 1.0

    def validate(self) -> None:
        for name in ('stage1_steps', 'stage2_steps', 'feature_steps', 'encoder_warmup_steps'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.vae_steps is not None and self.vae_steps < 0:
            raise ValueError(f"vae_steps must be non-negative, got {self.vae_steps}")
        for name in ('lr_g', 'lr_d', 'lr_e', 'finetune_ratio'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.lr_floor <= 1:
            raise ValueError(f"lr_floor must be in (0, 1], got {self.lr_floor}")
        if self.pl_weight is not None and self.pl_weight < 0:
            raise ValueError(f"pl_weight must be non-negative, got {self.pl_weight}")
        if self.batch_size < 1 or self.log_every < 1 or self.pl_every < 1:
            raise ValueError("batch_size, log_every and pl_every must be at least 1")
        if self.feature_mode not in ('pretrained', 'random'):
            raise ValueError(f"feature_mode must be 'pretrained' or 'random', got {self.feature_mode}")
        if self.kl_weight < 0 or self.noise_scale < 0:
            raise ValueError("kl_weight and noise_scale must be non-negative")
        self.weights.validate()
        self.dims.validate()

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def path_length_weight(self) -> float:
        if self.pl_weight is not None:
            return self.pl_weight
        return Config.PATH_LENGTH_WEIGHT if self.dataset == 'shapes' else 0.0

    def stage2_lr(self, base: float, step: int, steps: int) -> float:
        """Linear decay from base to base * lr_floor over the run"""
        if steps <= 1:
            return base
        return base * (1.0 - (1.0 - self.lr_floor) * step / (steps - 1))


class GradLog:
    """Rows of (step, layer, mean |grad|, loss, recon)"""

    COLUMNS = ['step', 'layer', 'mean_abs_grad', 'loss', 'recon']

    def __init__(self, stage: str):
        self.stage = stage
        self.rows: List[Tuple[int, str, float, float, float]] = []

    def record(self, step: int, layers: Sequence[str], grads: Dict[str, Optional[np.ndarray]],
               loss: float, recon: float = float('nan')) -> None:
        for layer in layers:
            parts = [np.abs(g).reshape(-1) for name, g in grads.items()
                     if name.startswith(layer + '.') and g is not None]
            value = float(np.mean(np.concatenate(parts))) if parts else float('nan')
            self.rows.append((step, layer, value, float(loss), float(recon)))

    def __len__(self):
        return len(self.rows)

    @property
    def layers(self) -> List[str]:
        return list(OrderedDict.fromkeys(row[1] for row in self.rows))

    @property
    def steps(self) -> List[int]:
        return list(OrderedDict.fromkeys(row[0] for row in self.rows))

    def series(self, layer: str) -> np.ndarray:
        return np.array([row[2] for row in self.rows if row[1] == layer], dtype=np.float64)

    def losses(self) -> np.ndarray:
        """One loss per logged step"""
        seen = OrderedDict()
        for step, _, _, loss, _ in self.rows:
            seen.setdefault(step, loss)
        return np.array(list(seen.values()), dtype=np.float64)

    def recons(self) -> np.ndarray:
        seen = OrderedDict()
        for step, _, _, _, recon in self.rows:
            seen.setdefault(step, recon)
        return np.array(list(seen.values()), dtype=np.float64)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.COLUMNS)

    def to_csv(self, path: str) -> None:
        write_csv(path, self.to_frame())


def _watched_gradients(tape: Tape, loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    names = list(params)
    grads = tape.gradient(loss, [params[n] for n in names], create_graph=False)
    return dict(zip(names, grads))


def _check_finite(stage: str, step: int, value: float, grads: Dict[str, Tensor]) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(stage, step, f"loss is {value}")
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad.data)):
            raise TrainingDivergedError(stage, step, f"non-finite gradient for {name}")


def _batch(rows: np.ndarray, rng: np.random.Generator, size: int) -> Tensor:
    return Tensor(rows[rng.integers(0, rows.shape[0], size=size)])


def _prior(rng: np.random.Generator, size: int, latent_dim: int) -> Tensor:
    return Tensor(rng.standard_normal((size, latent_dim)))


def _numpy_grads(grads: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: grad.data for name, grad in grads.items()}


def pretrain_feature_extractor(model: LiaModel, data: Dataset, steps: int, seed: int,
                               batch_size: int = Config.BATCH_SIZE, lr: float = Config.LEARNING_RATE) -> MLP:
    """Fit eps plus a linear head to the dataset's ground-truth factors, then freeze eps"""
    if data.factors.shape[0] != data.train.shape[0]:
        raise ValueError("Feature pretraining needs one factor row per training sample")
    rng = np.random.default_rng([seed, STREAM_FEATURES])
    head = MLP.init('eps_head', [model.dims.feat_dim, data.factors.shape[1]], rng)
    params = OrderedDict(model.eps.parameters())
    params.update(head.parameters())
    optimizer = Adam(params, lr, betas=(0.9, 0.999))
    loss_value = float('nan')
    for step in range(steps):
        idx = rng.integers(0, data.train.shape[0], size=batch_size)
        x, target = Tensor(data.train[idx]), Tensor(data.factors[idx])
        with Tape() as tape:
            tape.watch(*params.values())
            prediction = head(feature_forward(model, x))
            loss = mean(square(prediction - target))
            grads = _watched_gradients(tape, loss, params)
        loss_value = loss.item()
        _check_finite('feature pretraining', step, loss_value, grads)
        optimizer.step(grads)
        if (step + 1) % max(1, steps // 4) == 0:
            logger.info(f"Feature pretraining step {step + 1}/{steps}: factor MSE {loss_value:.5f}")
    model.eps_frozen = True
    logger.info(f"Feature extractor frozen after {steps} pretraining steps (final factor MSE {loss_value:.5f})")
    return head


def build_model(config: TrainConfig, data: Dataset) -> LiaModel:
    """Fresh model sized to the dataset, with eps pretrained (or left random) and frozen"""
    config.validate()
    dims = replace(config.dims, data_dim=data.data_dim, output_scale=data.output_scale)
    model = LiaModel.init(dims, config.seed)
    if config.feature_mode == 'pretrained' and config.feature_steps > 0:
        pretrain_feature_extractor(model, data, config.feature_steps, config.seed, config.batch_size)
    model.eps_frozen = True
    return model


def _critic_step(critic: MLP, optimizer: Adam, x_real: Tensor, x_fake: Tensor,
                 gamma: float, stage: str, step: int) -> float:
    params = critic.parameters()
    with Tape() as tape:
        tape.watch(*params.values())
        loss = critic_loss(critic, x_real, x_fake, gamma)
        grads = _watched_gradients(tape, loss, params)
    value = loss.item()
    _check_finite(stage, step, value, grads)
    optimizer.step(grads)
    return value


def _sample_path_lengths(model: LiaModel, rng: np.random.Generator, size: int) -> Tensor:
    """||J_g(y)^T r|| at y = phi^-1(z), with r ~ N(0, I / data_dim); y is held constant"""
    y = coupling_inverse(model.phi, _prior(rng, size, model.dims.latent_dim)).detach()
    noise = Tensor(rng.standard_normal((size, model.dims.data_dim)) / np.sqrt(model.dims.data_dim))
    return path_lengths(model.g, y, noise)


def train_stage1(config: TrainConfig, data: Dataset, model: Optional[LiaModel] = None) -> Tuple[LiaModel, GradLog]:
    """Adversarial training of {phi, g, c}; the encoder is left untouched"""
    if model is None:
        model = build_model(config, data)
    rng = config.rng(STREAM_STAGE1)
    latent, batch = model.dims.latent_dim, config.batch_size
    decoder_params = model.parameters('phi', 'g')
    opt_g = Adam(decoder_params, config.lr_g)
    opt_d = Adam(model.c.parameters(), config.lr_d)
    layers = model.phi.layer_names + model.g.layer_names
    log = GradLog('stage1')
    pl_weight = config.path_length_weight()
    pl_rng = config.rng(STREAM_PATH)
    pl_mean = 0.0

    logger.info(f"🚀 Stage 1: {config.stage1_steps} steps on {data.name} (batch {batch}, seed {config.seed}, "
                f"path-length weight {pl_weight})")
    logger.info(f"💾 Memory usage before stage 1: {get_memory_usage():.1f} MB")
    for step in range(config.stage1_steps):
        try:
            x_real = _batch(data.train, rng, batch)
            x_fake = decode_prior(model, _prior(rng, batch, latent))
            d_loss = _critic_step(model.c, opt_d, x_real, x_fake, config.weights.gamma, 'stage 1', step)

            z = _prior(rng, batch, latent)
            with Tape() as tape:
                tape.watch(*decoder_params.values())
                g_loss = adv_loss(model.c, decode_prior(model, z))
                total = g_loss
                if pl_weight > 0 and step % config.pl_every == 0:
                    lengths = _sample_path_lengths(model, pl_rng, max(1, batch // 2))
                    pl_mean += Config.PATH_LENGTH_DECAY * (float(np.mean(lengths.data)) - pl_mean)
                    total = total + mul(path_length_penalty(lengths, pl_mean), pl_weight * config.pl_every)
                grads = _watched_gradients(tape, total, decoder_params)
            g_value = g_loss.item()
            _check_finite('stage 1', step, total.item(), grads)
            opt_g.step(grads)
        except NonFiniteError as e:
            raise TrainingDivergedError('stage 1', step, str(e)) from e

        if step % config.log_every == 0 or step == config.stage1_steps - 1:
            log.record(step, layers, _numpy_grads(grads), g_value)
            if step % (config.log_every * 10) == 0:
                logger.info(f"Stage 1 step {step}: critic {d_loss:.4f}, generator {g_value:.4f}, "
                            f"mean path length {pl_mean:.4f}")
    logger.info(f"✅ Stage 1 finished; 💾 memory usage {get_memory_usage():.1f} MB")
    return model, log


def warm_start_encoder(model: LiaModel, encoder: MLP, config: TrainConfig, stream: int,
                       target: str = 'y') -> float:
    """Regress an encoder onto generated pairs before its main objective.

    Samples z ~ N(0, I), decodes x = g(phi^-1(z)) with everything frozen and fits
    the encoder's first latent_dim outputs to phi^-1(z) (target 'y') or to z
    (target 'z', the mean head of a variational encoder). Returns the last MSE.
    """
    if target not in ('y', 'z'):
        raise ValueError(f"target must be 'y' or 'z', got {target}")
    rng = config.rng(stream)
    latent = model.dims.latent_dim
    params = encoder.parameters()
    optimizer = Adam(params, config.lr_g, betas=(0.9, 0.999))
    stage = f"{encoder.name} warm start"
    loss_value = float('nan')
    for step in range(config.encoder_warmup_steps):
        try:
            z = _prior(rng, config.batch_size, latent)
            y = coupling_inverse(model.phi, z)
            x = generator_forward(model, y)
            wanted = y if target == 'y' else z
            with Tape() as tape:
                tape.watch(*params.values())
                prediction = slice_(encoder(x), 0, latent, axis=1)
                loss = mean(square(prediction - wanted))
                grads = _watched_gradients(tape, loss, params)
            loss_value = loss.item()
            _check_finite(stage, step, loss_value, grads)
            optimizer.step(grads)
        except NonFiniteError as e:
            raise TrainingDivergedError(stage, step, str(e)) from e
    logger.info(f"Encoder {encoder.name} warm-started for {config.encoder_warmup_steps} steps "
                f"on generated pairs (code MSE {loss_value:.5f})")
    return loss_value


def train_stage2(config: TrainConfig, model: LiaModel, data: Dataset) -> Tuple[LiaModel, GradLog]:
    """Train f against the frozen g (phi bypassed) while fine-tuning the critic.

    f is first warm-started on generated pairs, then both learning rates decay
    linearly to lr_floor of their base value.
    """
    model.dims.require_bottleneck()
    rng = config.rng(STREAM_STAGE2)
    batch = config.batch_size
    encoder_params = model.f.parameters()
    lr_d = config.lr_d * config.finetune_ratio
    opt_e = Adam(encoder_params, config.lr_e)
    opt_d = Adam(model.c.parameters(), lr_d)
    eps = model.eps
    log = GradLog('stage2')

    logger.info(f"🚀 Stage 2: {config.stage2_steps} steps on {data.name}; phi, g and eps frozen")
    logger.info(f"💾 Memory usage before stage 2: {get_memory_usage():.1f} MB")
    if config.stage2_steps > 0 and config.encoder_warmup_steps > 0:
        warm_start_encoder(model, model.f, config, STREAM_WARMUP)
    for step in range(config.stage2_steps):
        opt_e.lr = config.stage2_lr(config.lr_e, step, config.stage2_steps)
        opt_d.lr = config.stage2_lr(lr_d, step, config.stage2_steps)
        try:
            x = _batch(data.train, rng, batch)
            codes = encoder_forward(model, x)
            x_fake = generator_forward(model, codes)
            d_loss = _critic_step(model.c, opt_d, x, x_fake, config.weights.gamma, 'stage 2', step)

            with Tape() as tape:
                tape.watch(*encoder_params.values())
                x_tilde = generator_forward(model, encoder_forward(model, x))
                total, recon, _ = encoder_objective_terms(x, x_tilde, eps, model.c, config.weights)
                grads = _watched_gradients(tape, total, encoder_params)
            value = total.item()
            _check_finite('stage 2', step, value, grads)
            opt_e.step(grads)
        except NonFiniteError as e:
            raise TrainingDivergedError('stage 2', step, str(e)) from e

        if step % config.log_every == 0 or step == config.stage2_steps - 1:
            log.record(step, model.f.layer_names, _numpy_grads(grads), value, recon.item())
            if step % (config.log_every * 10) == 0:
                code_scale = float(np.mean(np.abs(codes.data)))
                logger.info(f"Stage 2 step {step}: encoder {value:.4f} (recon {recon.item():.4f}), "
                            f"critic {d_loss:.4f}, mean |y| {code_scale:.3f}")
                if code_scale > CODE_DRIFT_LIMIT:
                    logger.warning(f"Stage 2 step {step}: encoded y drifted far from the prior "
                                   f"(mean |y| {code_scale:.3f})")
    logger.info(f"✅ Stage 2 finished; 💾 memory usage {get_memory_usage():.1f} MB")
    return model, log


def train_vae_baseline(config: TrainConfig, model: LiaModel, data: Dataset) -> GradLog:
    """Variational encoder x -> (mu, logvar) -> z -> phi^-1 -> g against a fine-tuned critic copy.

    Uses the same warm start (on the mean head) and learning-rate schedule as Stage 2.
    Non-finite steps are skipped and logged; only a run of NAN_PATIENCE of them aborts.
    """
    model.dims.require_bottleneck()
    rng = config.rng(STREAM_VAE)
    steps = config.stage2_steps if config.vae_steps is None else config.vae_steps
    batch, latent = config.batch_size, model.dims.latent_dim
    q = init_vae_encoder(model.dims, int(rng.integers(0, 2 ** 31)))
    critic = model.c.copy()
    encoder_params = q.parameters()
    lr_d = config.lr_d * config.finetune_ratio
    opt_e = Adam(encoder_params, config.lr_e)
    opt_d = Adam(critic.parameters(), lr_d)
    eps = model.eps
    log = GradLog('vae')
    consecutive_nan = 0

    logger.info(f"🚀 Variational baseline: {steps} steps, KL weight {config.kl_weight}, "
                f"noise scale {config.noise_scale}")
    if steps > 0 and config.encoder_warmup_steps > 0:
        warm_start_encoder(model, q, config, STREAM_WARMUP, target='z')
    for step in range(steps):
        opt_e.lr = config.stage2_lr(config.lr_e, step, steps)
        opt_d.lr = config.stage2_lr(lr_d, step, steps)
        x = _batch(data.train, rng, batch)
        noise = Tensor(config.noise_scale * rng.standard_normal((batch, latent)))
        try:
            _, _, z_sample = vae_encoder_forward(q, x, noise)
            x_fake = generator_forward(model, coupling_inverse(model.phi, z_sample))
            _critic_step(critic, opt_d, x, x_fake, config.weights.gamma, 'vae baseline', step)

            with Tape() as tape:
                tape.watch(*encoder_params.values())
                mu, logvar, z_sample = vae_encoder_forward(q, x, noise)
                x_tilde = generator_forward(model, coupling_inverse(model.phi, z_sample))
                recon = recon_loss(x, x_tilde, eps, config.weights.beta1)
                total = mul(recon, config.weights.beta2) + adv_loss(critic, x_tilde)
                if config.kl_weight:
                    total = total + mul(kl_gaussian(mu, logvar), config.kl_weight)
                grads = _watched_gradients(tape, total, encoder_params)
            value = total.item()
            _check_finite('vae baseline', step, value, grads)
        except (NonFiniteError, TrainingDivergedError) as e:
            consecutive_nan += 1
            logger.warning(f"Variational baseline step {step} non-finite ({consecutive_nan} in a row): {e}")
            if step % config.log_every == 0:
                log.record(step, q.layer_names, {}, float('nan'))
            if consecutive_nan >= NAN_PATIENCE:
                raise TrainingDivergedError('vae baseline', step, f"{NAN_PATIENCE} consecutive non-finite steps")
            continue
        consecutive_nan = 0
        opt_e.step(grads)

        if step % config.log_every == 0 or step == steps - 1:
            log.record(step, q.layer_names, _numpy_grads(grads), value, recon.item())
            if step % (config.log_every * 10) == 0:
                logger.info(f"VAE baseline step {step}: loss {value:.4f} (recon {recon.item():.4f})")
    logger.info(f"✅ Variational baseline finished; 💾 memory usage {get_memory_usage():.1f} MB")
    return log


def smooth(values: np.ndarray, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Trailing moving average; the first entries average whatever is available"""
    return pd.Series(np.asarray(values, dtype=np.float64)).rolling(window, min_periods=1).mean().to_numpy()


def window_means_nonincreasing(values: np.ndarray, window: int, skip_fraction: float = 0.2,
                               z_score: float = 3.0) -> bool:
    """Trailing-window average of a noisy loss, read once per window, never rises significantly.

    After dropping the first skip_fraction, values are cut into consecutive windows. Each
    window mean may exceed the previous one by at most z_score standard errors of their
    difference; a rise smaller than that is minibatch noise, not a trend.
    """
    values = np.asarray(values, dtype=np.float64)
    tail = values[int(len(values) * skip_fraction):]
    window = max(1, int(window))
    blocks = [tail[i:i + window] for i in range(0, len(tail) - window + 1, window)]
    if len(blocks) < 2:
        return True
    means = np.array([np.mean(b) for b in blocks])
    errors = np.array([np.std(b, ddof=1) / np.sqrt(len(b)) if len(b) > 1 else 0.0 for b in blocks])
    allowed = z_score * np.sqrt(errors[:-1] ** 2 + errors[1:] ** 2)
    return bool(np.all(np.diff(means) <= allowed))


def summarize_gradients(log: GradLog, window: int = SMOOTHING_WINDOW, log_every: int = 1) -> Dict[str, object]:
    """Mean and std of |grad| for the first, middle and last layer, plus the smoothed loss"""
    layers = log.layers
    if not layers:
        raise ValueError(f"{log.stage} gradient log is empty")
    picks = OrderedDict([('first', layers[0]), ('middle', layers[len(layers) // 2]), ('last', layers[-1])])
    summary: Dict[str, object] = {}
    for position, layer in picks.items():
        series = log.series(layer)
        finite = series[np.isfinite(series)]
        summary[position] = {
            'layer': layer,
            'mean': float(np.mean(finite)) if finite.size else float('nan'),
            'std': float(np.std(finite)) if finite.size else float('nan'),
            'nan_steps': int(series.size - finite.size),
        }
    # window is counted in training steps; rows exist every log_every steps
    summary['smoothed_loss'] = smooth(log.losses(), max(1, window // log_every))
    summary['smoothed_recon'] = smooth(log.recons(), max(1, window // log_every))
    return summary
