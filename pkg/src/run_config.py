"""
Plain-text run configuration.

One ``key = value`` pair per line, ``#`` starts a comment. Every key must be in
SCHEMA; values are converted to the schema type. Command-line flags override
file values, and the resolved result is written into each run directory.
"""

import logging
import os
from collections import OrderedDict
from typing import Any, Callable, Dict, Optional

from config import Config
from .losses import LossWeights
from .model import ModelDims
from .trainer import TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"expected one of {options}")
        return value
    return parse


def _positive(kind):
    def parse(value: str):
        parsed = kind(value)
        if parsed <= 0:
            raise ValueError("must be positive")
        return parsed
    return parse


def _non_negative(kind):
    def parse(value: str):
        parsed = kind(value)
        if parsed < 0:
            raise ValueError("must be non-negative")
        return parsed
    return parse


def _index_pair(value: str) -> str:
    """'I,J' with two non-negative indices, normalized to 'I,J'"""
    try:
        first, second = (int(part) for part in value.split(','))
    except ValueError:
        raise ValueError("expected 'I,J'") from None
    if first < 0 or second < 0:
        raise ValueError("indices must be non-negative")
    return f"{first},{second}"


# key -> (parser, default); None defaults are resolved per dataset or subcommand
SCHEMA: Dict[str, tuple] = OrderedDict([
    ('seed', (int, Config.SEED)),
    ('dataset', (_choice('gaussians', 'shapes'), 'gaussians')),
    ('n_samples', (_positive(int), None)),
    ('batch_size', (_positive(int), Config.BATCH_SIZE)),
    ('stage1_steps', (_non_negative(int), None)),
    ('stage2_steps', (_non_negative(int), Config.STAGE2_STEPS)),
    ('vae_steps', (_non_negative(int), None)),
    ('feature_steps', (_non_negative(int), Config.FEATURE_PRETRAIN_STEPS)),
    ('feature_mode', (_choice('pretrained', 'random'), 'pretrained')),
    ('lr_g', (_positive(float), Config.LEARNING_RATE)),
    ('lr_d', (_positive(float), Config.LEARNING_RATE)),
    ('lr_e', (_positive(float), Config.ENCODER_LEARNING_RATE)),
    ('finetune_ratio', (_positive(float), Config.FINETUNE_RATIO)),
    ('lr_floor', (_positive(float), Config.STAGE2_LR_FLOOR)),
    ('encoder_warmup_steps', (_non_negative(int), Config.ENCODER_WARMUP_STEPS)),
    ('pl_weight', (_non_negative(float), None)),
    ('pl_every', (_positive(int), Config.PATH_LENGTH_EVERY)),
    ('beta1', (_non_negative(float), Config.BETA1)),
    ('beta2', (_non_negative(float), Config.BETA2)),
    ('gamma', (_non_negative(float), Config.GAMMA)),
    ('kl_weight', (_non_negative(float), 1.0)),
    ('noise_scale', (_non_negative(float), 1.0)),
    ('latent_dim', (_positive(int), Config.LATENT_DIM)),
    ('hidden', (_positive(int), Config.HIDDEN)),
    ('depth', (_positive(int), Config.DEPTH)),
    ('coupling_layers', (_positive(int), Config.COUPLING_LAYERS)),
    ('log_every', (_positive(int), Config.LOG_EVERY)),
    ('inversion_steps', (_non_negative(int), Config.INVERSION_STEPS)),
    ('inversion_lr', (_positive(float), Config.INVERSION_LR)),
    ('init', (_choice('random', 'mean', 'encoder'), 'encoder')),
    ('space', (_choice('y', 'z'), 'y')),
    ('metric_samples', (_positive(int), Config.METRIC_SAMPLES)),
    ('swd_projections', (_positive(int), Config.SWD_PROJECTIONS)),
    ('path_eps', (_positive(float), Config.PATH_EPS)),
    ('n_pairs', (_positive(int), 20)),
    ('frames', (_positive(int), 8)),
    ('threads', (_positive(int), Config.THREADS)),
    ('checkpoint', (str, '')),
    ('data', (str, '')),
    ('index', (_non_negative(int), 0)),
    ('endpoints', (_index_pair, '0,1')),
])


def _format(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Validated key/value settings for one CLI run"""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values: Dict[str, Any] = OrderedDict((key, default) for key, (_, default) in SCHEMA.items())
        for key, value in (values or {}).items():
            if value is not None:
                self.set(key, value)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(value) if isinstance(value, str) else parser(str(value))
        except ValueError as e:
            raise ConfigError(key, f"bad value {value!r} ({e})") from e

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = '<text>') -> 'RunConfig':
        config = cls()
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(line, f"{source}:{number} is not a 'key = value' line")
            key, value = (part.strip() for part in line.split('=', 1))
            config.set(key, value)
        return config

    @classmethod
    def load(cls, path: Optional[str]) -> 'RunConfig':
        if path is None:
            return cls()
        with open(path, 'r', encoding='utf-8') as handle:
            config = cls.parse(handle.read(), source=path)
        logger.info(f"Loaded run config from {path}")
        return config

    def override(self, **flags: Any) -> 'RunConfig':
        """Apply flag values that were actually given"""
        for key, value in flags.items():
            if value is not None:
                self.set(key, value)
        return self

    def resolved(self) -> Dict[str, Any]:
        values = OrderedDict(self.values)
        if values['stage1_steps'] is None:
            values['stage1_steps'] = (Config.STAGE1_STEPS_SHAPES if values['dataset'] == 'shapes'
                                      else Config.STAGE1_STEPS_2D)
        if values['n_samples'] is None:
            values['n_samples'] = (Config.SHAPES_SAMPLES if values['dataset'] == 'shapes'
                                   else Config.GAUSSIAN_SAMPLES)
        if values['pl_weight'] is None:
            values['pl_weight'] = Config.PATH_LENGTH_WEIGHT if values['dataset'] == 'shapes' else 0.0
        if values['vae_steps'] is None:
            values['vae_steps'] = values['stage2_steps']
        return values

    def dump(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write("# resolved run configuration\n")
            for key, value in self.resolved().items():
                handle.write(f"{key} = {_format(value)}\n")

    def dims(self) -> ModelDims:
        v = self.resolved()
        return ModelDims(latent_dim=v['latent_dim'], hidden=v['hidden'], depth=v['depth'],
                         coupling_layers=v['coupling_layers'])

    def train_config(self) -> TrainConfig:
        v = self.resolved()
        config = TrainConfig(
            seed=v['seed'], batch_size=v['batch_size'], stage1_steps=v['stage1_steps'],
            stage2_steps=v['stage2_steps'], vae_steps=v['vae_steps'], lr_g=v['lr_g'], lr_d=v['lr_d'],
            lr_e=v['lr_e'], finetune_ratio=v['finetune_ratio'], lr_floor=v['lr_floor'],
            encoder_warmup_steps=v['encoder_warmup_steps'], pl_weight=v['pl_weight'], pl_every=v['pl_every'],
            weights=LossWeights(beta1=v['beta1'], beta2=v['beta2'], gamma=v['gamma']),
            dims=self.dims(), dataset=v['dataset'], log_every=v['log_every'], feature_steps=v['feature_steps'],
            feature_mode=v['feature_mode'], kl_weight=v['kl_weight'], noise_scale=v['noise_scale'])
        try:
            config.validate()
        except ValueError as e:
            key = next((k for k in SCHEMA if k in str(e)), 'config')
            raise ConfigError(key, str(e)) from e
        return config

