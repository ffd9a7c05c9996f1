"""
Command-line surface.

    python main.py <subcommand> [--config PATH] [--seed N] [--out DIR] [--steps N] ...

Exit codes: 0 success, 1 runtime failure, 2 bad usage or config,
3 missing checkpoint. Each run directory gets a config.txt holding every
setting, paths included, so passing it back with --config repeats the run.
"""

import argparse
import logging
import os
from datetime import datetime
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from .datasets import Dataset, dataset_from_checkpoint, dataset_to_checkpoint, load_dataset
from .inversion import initial_latent, invert_y, invert_z, reconstruct
from .metrics import (LatentView, MetricError, evaluate_model, path_straightness, reconstruction_report,
                      write_reports)
from .model import (LiaModel, decode_prior, encoder_forward, generator_forward, model_from_checkpoint,
                    model_to_checkpoint)
from .run_config import ConfigError, RunConfig
from .storage import CheckpointError, load_checkpoint, save_checkpoint, write_csv, write_image, write_image_grid
from .tensor import Tensor
from .trainer import TrainingDivergedError, summarize_gradients, train_stage1, train_stage2, train_vae_baseline
from .coupling import coupling_forward, coupling_inverse

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_MISSING_CHECKPOINT = 0, 1, 2, 3
SUBCOMMANDS = ('gen-data', 'train-stage1', 'train-stage2', 'vae-baseline', 'invert', 'interpolate', 'metrics')
STEP_KEYS = {'train-stage1': 'stage1_steps', 'train-stage2': 'stage2_steps', 'vae-baseline': 'vae_steps',
             'invert': 'inversion_steps'}
PREVIEW_COUNT = 64


class MissingCheckpointError(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting"""

    def error(self, message):
        raise ConfigError('args', message)


def build_parser(subcommand: str) -> argparse.ArgumentParser:
    parser = _Parser(prog=f"main.py {subcommand}")
    parser.add_argument('--config', help="key = value file")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', help="run directory (default: timestamped under LIA_RUNS_DIR)")
    parser.add_argument('--steps', type=int)
    parser.add_argument('--space', choices=['y', 'z'])
    parser.add_argument('--init', choices=['random', 'mean', 'encoder'])
    parser.add_argument('--dataset', choices=['gaussians', 'shapes'])
    parser.add_argument('--data', help="dataset checkpoint written by gen-data")
    parser.add_argument('--checkpoint', help="model checkpoint from an earlier stage")
    parser.add_argument('--index', type=int, help="held-out sample to invert")
    parser.add_argument('--endpoints', help="I,J endpoint indices for interpolate")
    parser.add_argument('--frames', type=int)
    return parser


def _run_dir(subcommand: str, out: Optional[str]) -> str:
    path = out or os.path.join(Config.RUNS_DIR, f"{subcommand}-{datetime.now().strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(path, exist_ok=True)
    return path


def _load_model(path: Optional[str]) -> LiaModel:
    if not path or not os.path.exists(path):
        raise MissingCheckpointError(f"Checkpoint not found: {path}")
    return model_from_checkpoint(load_checkpoint(path))


def _dataset(config: RunConfig) -> Dataset:
    data_path = config['data']
    if data_path:
        if not os.path.exists(data_path):
            raise ConfigError('data', f"dataset file not found: {data_path}")
        return dataset_from_checkpoint(load_checkpoint(data_path))
    values = config.resolved()
    return load_dataset(values['dataset'], values['n_samples'], values['seed'])


def _check_data(model: LiaModel, data: Dataset) -> None:
    if model.dims.data_dim != data.data_dim:
        raise ConfigError('dataset', f"checkpoint expects samples of dim {model.dims.data_dim}, "
                                     f"dataset '{data.name}' has dim {data.data_dim}")


def _parse_endpoints(text: str) -> Tuple[int, int]:
    try:
        first, second = (int(part) for part in text.split(','))
    except ValueError:
        raise ConfigError('endpoints', f"expected 'I,J', got {text!r}") from None
    return first, second


def _export_samples(model: LiaModel, data: Dataset, out_dir: str, seed: int) -> None:
    z = Tensor(np.random.default_rng(seed).standard_normal((PREVIEW_COUNT, model.dims.latent_dim)))
    samples = decode_prior(model, z).numpy()
    if data.is_image:
        write_image_grid(os.path.join(out_dir, 'samples.pgm'), samples.reshape(-1, *data.image_shape))
    else:
        write_csv(os.path.join(out_dir, 'samples.csv'), pd.DataFrame(samples, columns=['x', 'y']))


def _export_reconstructions(model: LiaModel, data: Dataset, out_dir: str) -> None:
    if not data.is_image:
        return
    x = data.heldout[:PREVIEW_COUNT // 2]
    recon = generator_forward(model, encoder_forward(model, Tensor(x))).numpy()
    pairs = [image for row in zip(x, recon) for image in row]
    write_image_grid(os.path.join(out_dir, 'reconstructions.pgm'), [p.reshape(data.image_shape) for p in pairs])


def _endpoint_codes(model: LiaModel, data: Optional[Dataset], endpoints: Tuple[int, int], seed: int) -> np.ndarray:
    """y codes of two held-out samples via f, or of two seeded prior draws when there is no encoder"""
    if data is not None and model.dims.latent_dim < model.dims.data_dim:
        for index in endpoints:
            if not 0 <= index < data.heldout.shape[0]:
                raise ConfigError('endpoints', f"index {index} outside held-out set of {data.heldout.shape[0]}")
        return encoder_forward(model, Tensor(data.heldout[list(endpoints)])).numpy()
    draws = np.random.default_rng(seed).standard_normal((max(endpoints) + 1, model.dims.latent_dim))
    return coupling_inverse(model.phi, Tensor(draws[list(endpoints)])).numpy()


def interpolate(ckpt: str, space: str, endpoints: Tuple[int, int], n_steps: int, out_dir: str,
                data: Optional[Dataset] = None, seed: int = Config.SEED) -> List[str]:
    """Write n_steps frames along the straight path between two codes, plus its straightness"""
    model = _load_model(ckpt)
    if data is not None:
        _check_data(model, data)
    if n_steps < 2:
        raise ConfigError('frames', f"need at least 2 frames, got {n_steps}")
    if space not in ('y', 'z'):
        raise ConfigError('space', f"unknown space {space!r}")
    ya, yb = _endpoint_codes(model, data, endpoints, seed)
    a, b = (ya, yb) if space == 'y' else tuple(coupling_forward(model.phi, Tensor(np.stack([ya, yb]))).numpy())
    t = np.linspace(0.0, 1.0, n_steps).reshape(-1, 1)
    line = a + t * (b - a)
    line[-1] = b
    codes = Tensor(line)
    if space == 'z':
        codes = coupling_inverse(model.phi, codes)
    frames = generator_forward(model, codes).numpy()

    os.makedirs(out_dir, exist_ok=True)
    written = []
    if data is not None and data.is_image:
        for i, frame in enumerate(frames):
            path = os.path.join(out_dir, f"frame_{i:03d}.pgm")
            write_image(path, frame.reshape(data.image_shape))
            written.append(path)
    else:
        path = os.path.join(out_dir, 'frames.csv')
        write_csv(path, pd.DataFrame(frames, columns=[f"x{i}" for i in range(frames.shape[1])]))
        written.append(path)

    rows = []
    try:
        rows.append({'space': space, 'n_steps': n_steps,
                     'straightness': path_straightness(LatentView.from_model(model), space, ya, yb, n_steps)})
    except MetricError as e:
        logger.warning(f"Path straightness not computed: {e}")
    write_csv(os.path.join(out_dir, 'straightness.csv'),
              pd.DataFrame(rows, columns=['space', 'n_steps', 'straightness']))
    logger.info(f"Wrote {n_steps} interpolation frames ({space}-space) to {out_dir}")
    return written


def _gen_data(config: RunConfig, out_dir: str) -> None:
    values = config.resolved()
    data = load_dataset(values['dataset'], values['n_samples'], values['seed'])
    save_checkpoint(os.path.join(out_dir, 'dataset.lia'), dataset_to_checkpoint(data))
    if data.is_image:
        write_image_grid(os.path.join(out_dir, 'preview.pgm'),
                         [row.reshape(data.image_shape) for row in data.train[:PREVIEW_COUNT]])
    else:
        write_csv(os.path.join(out_dir, 'preview.csv'), pd.DataFrame(data.train[:1000], columns=['x', 'y']))


def _train_stage1(config: RunConfig, out_dir: str) -> None:
    train_config = config.train_config()
    data = _dataset(config)
    model, log = train_stage1(train_config, data)
    save_checkpoint(os.path.join(out_dir, 'model.lia'), model_to_checkpoint(model))
    log.to_csv(os.path.join(out_dir, 'stage1_grads.csv'))
    _export_samples(model, data, out_dir, train_config.seed)


def _train_stage2(config: RunConfig, out_dir: str) -> None:
    model = _load_model(config['checkpoint'])
    train_config = config.train_config()
    data = _dataset(config)
    _check_data(model, data)
    model, log = train_stage2(train_config, model, data)
    save_checkpoint(os.path.join(out_dir, 'model.lia'), model_to_checkpoint(model))
    log.to_csv(os.path.join(out_dir, 'stage2_grads.csv'))
    _export_reconstructions(model, data, out_dir)


def _vae_baseline(config: RunConfig, out_dir: str) -> None:
    model = _load_model(config['checkpoint'])
    train_config = config.train_config()
    data = _dataset(config)
    _check_data(model, data)
    log = train_vae_baseline(train_config, model, data)
    log.to_csv(os.path.join(out_dir, 'vae_grads.csv'))
    summary = summarize_gradients(log, log_every=train_config.log_every)
    rows = [dict(position=key, **summary[key]) for key in ('first', 'middle', 'last')]
    write_csv(os.path.join(out_dir, 'gradient_summary.csv'), pd.DataFrame(rows))


def _invert(config: RunConfig, out_dir: str) -> None:
    model = _load_model(config['checkpoint'])
    values = config.resolved()
    data = _dataset(config)
    _check_data(model, data)
    if not 0 <= values['index'] < data.heldout.shape[0]:
        raise ConfigError('index', f"{values['index']} outside held-out set of {data.heldout.shape[0]}")
    x = data.heldout[values['index']:values['index'] + 1]
    steps, lr, seed = values['inversion_steps'], values['inversion_lr'], values['seed']
    if values['space'] == 'y':
        result = invert_y(model, x, values['init'], steps, lr, seed=seed, beta1=values['beta1'])
    else:
        y0 = initial_latent(model, Tensor(x), values['init'], seed)
        result = invert_z(model, x, y0, steps, lr, beta1=values['beta1'], init_mode=values['init'])
    write_csv(os.path.join(out_dir, 'loss_curve.csv'), result.to_frame())
    write_csv(os.path.join(out_dir, 'latent.csv'),
              pd.DataFrame(result.latent, columns=[f"{result.space}{i}" for i in range(result.latent.shape[1])]))
    if data.is_image:
        write_image(os.path.join(out_dir, 'target.pgm'), x.reshape(data.image_shape))
        write_image(os.path.join(out_dir, 'reconstruction.pgm'), reconstruct(model, result).reshape(data.image_shape))


def _interpolate(config: RunConfig, out_dir: str) -> None:
    values = config.resolved()
    data = _dataset(config)
    interpolate(values['checkpoint'], values['space'], _parse_endpoints(values['endpoints']), values['frames'],
                out_dir, data, values['seed'])


def _metrics(config: RunConfig, out_dir: str) -> None:
    model = _load_model(config['checkpoint'])
    values = config.resolved()
    data = _dataset(config)
    _check_data(model, data)
    reports = evaluate_model(model, data.heldout, values['metric_samples'], values['seed'], values['n_pairs'],
                             values['threads'])
    if model.dims.latent_dim < model.dims.data_dim:
        reports.extend(reconstruction_report(model, data.heldout, seed=values['seed'],
                                             inversion_steps=values['inversion_steps'],
                                             inversion_lr=values['inversion_lr']))
    write_reports(os.path.join(out_dir, 'metrics.csv'), reports)


HANDLERS = {
    'gen-data': _gen_data,
    'train-stage1': _train_stage1,
    'train-stage2': _train_stage2,
    'vae-baseline': _vae_baseline,
    'invert': _invert,
    'interpolate': _interpolate,
    'metrics': _metrics,
}


def run(subcommand: str, args: Sequence[str]) -> int:
    """Execute one subcommand; returns the process exit code"""
    if subcommand not in HANDLERS:
        logger.error(f"Unknown subcommand '{subcommand}'; expected one of {', '.join(SUBCOMMANDS)}")
        return EXIT_USAGE
    try:
        parsed = build_parser(subcommand).parse_args(list(args))
        config = RunConfig.load(parsed.config)
        overrides = {'seed': parsed.seed, 'space': parsed.space, 'init': parsed.init,
                     'dataset': parsed.dataset, 'frames': parsed.frames, 'checkpoint': parsed.checkpoint,
                     'data': parsed.data, 'index': parsed.index, 'endpoints': parsed.endpoints}
        if parsed.steps is not None and subcommand in STEP_KEYS:
            overrides[STEP_KEYS[subcommand]] = parsed.steps
        config.override(**overrides)
        out_dir = _run_dir(subcommand, parsed.out)
        config.dump(os.path.join(out_dir, 'config.txt'))
        logger.info(f"🚀 Running {subcommand} into {out_dir}")
        HANDLERS[subcommand](config, out_dir)
    except SystemExit as e:
        return int(e.code or 0)
    except ConfigError as e:
        logger.error(f"❌ Bad configuration: {e}")
        return EXIT_USAGE
    except MissingCheckpointError as e:
        logger.error(f"❌ {e}")
        return EXIT_MISSING_CHECKPOINT
    except (TrainingDivergedError, CheckpointError, MetricError) as e:
        logger.error(f"❌ {subcommand} failed: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"❌ {subcommand} failed unexpectedly: {e}")
        return EXIT_FAILURE
    logger.info(f"✅ {subcommand} finished")
    return EXIT_OK
