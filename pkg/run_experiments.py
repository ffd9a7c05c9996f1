#!/usr/bin/env python3
"""
Standalone script that runs the directional studies end to end:
generation quality, reconstruction, y- vs z-space geometry, inversion
initializations, y- vs z-space inversion and gradient stability.
"""

import logging
import os
import sys
from dataclasses import replace
from datetime import datetime
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from config import Config
from src.coupling import coupling_inverse
from src.datasets import Dataset, load_dataset
from src.inversion import initial_latent, invert_y, invert_z
from src.metrics import LatentView, mse_metric, paired_straightness, path_length, sign_test, swd_metric
from src.model import LiaModel, decode_prior, encoder_forward, generator_forward
from src.storage import write_csv
from src.tensor import Tensor
from src.trainer import (SMOOTHING_WINDOW, TrainConfig, get_memory_usage, summarize_gradients, train_stage1,
                         train_stage2, train_vae_baseline, window_means_nonincreasing)

# Configure logging
logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    handlers=[
        logging.StreamHandler()
    ]
)

logger = logging.getLogger(__name__)

SEEDS = [int(s) for s in os.environ.get('LIA_EXPERIMENT_SEEDS', '0,1,2,3,4').split(',') if s.strip()]
HELDOUT_IMAGES = 20


def generation_study(seed: int, steps: int = Config.STAGE1_STEPS_2D) -> Dict[str, float]:
    """Stage-1 samples vs held-out points, against the gap between two real samples"""
    data = load_dataset('gaussians', seed=seed)
    config = TrainConfig(seed=seed, stage1_steps=steps, dataset='gaussians')
    model, _ = train_stage1(config, data)
    n = data.heldout.shape[0]
    z = Tensor(np.random.default_rng(seed).standard_normal((n, model.dims.latent_dim)))
    generated = decode_prior(model, z).numpy()
    swd_generated = swd_metric(generated, data.heldout, seed=seed)
    swd_real = swd_metric(data.train[:n], data.heldout, seed=seed)
    return {'swd_generated': swd_generated, 'swd_real': swd_real,
            'passed': float(swd_generated <= 3.0 * swd_real)}


def train_shapes(seed: int, stage1_steps: int = Config.STAGE1_STEPS_SHAPES,
                 stage2_steps: int = Config.STAGE2_STEPS, n_samples: int = Config.SHAPES_SAMPLES):
    data = load_dataset('shapes', n_samples, seed)
    config = TrainConfig(seed=seed, stage1_steps=stage1_steps, stage2_steps=stage2_steps, dataset='shapes')
    model, _ = train_stage1(config, data)
    stage1 = model.copy()
    model, stage2_log = train_stage2(config, model, data)
    return config, data, stage1, model, stage2_log


def reconstruction_study(model: LiaModel, data: Dataset, seed: int) -> Dict[str, float]:
    """Held-out MSE of g(f(x)) against the mean image and against random-code samples"""
    x = data.heldout
    recon = generator_forward(model, encoder_forward(model, Tensor(x))).numpy()
    mean_image = np.repeat(data.mean_sample(), x.shape[0], axis=0)
    z = Tensor(np.random.default_rng(seed).standard_normal((x.shape[0], model.dims.latent_dim)))
    random_recon = generator_forward(model, coupling_inverse(model.phi, z)).numpy()
    result = {'mse_encoder': mse_metric(x, recon), 'mse_mean_image': mse_metric(x, mean_image),
              'mse_random': mse_metric(x, random_recon)}
    result['passed'] = float(2.0 * result['mse_encoder'] <= min(result['mse_mean_image'], result['mse_random']))
    return result


def disentanglement_study(model: LiaModel, seeds: Sequence[int], n: int = Config.METRIC_SAMPLES,
                          n_pairs: int = 20) -> Dict[str, float]:
    view = LatentView.from_model(model)
    y_lengths = [path_length(view, 'y', 'full', n, seed=s) for s in seeds]
    z_lengths = [path_length(view, 'z', 'full', n, seed=s) for s in seeds]
    y_straight, z_straight = paired_straightness(view, n_pairs, seed=seeds[0])
    p_value = sign_test(y_straight, z_straight)
    return {'path_length_y': float(np.mean(y_lengths)), 'path_length_z': float(np.mean(z_lengths)),
            'straightness_y': float(np.mean(y_straight)), 'straightness_z': float(np.mean(z_straight)),
            'sign_test_p': p_value,
            'passed': float(np.mean(y_lengths) <= np.mean(z_lengths) and p_value < 0.05)}


def inversion_study(model: LiaModel, data: Dataset, seed: int, steps: int = Config.INVERSION_STEPS,
                    n_images: int = HELDOUT_IMAGES) -> Dict[str, float]:
    """Three initializations, each searched in y and in z from the same starting reconstruction"""
    modes = ('encoder', 'mean', 'random')
    finals = {mode: [] for mode in modes}
    firsts = {mode: [] for mode in modes}
    y_finals, z_finals, start_gaps = [], [], []
    for i in range(min(n_images, data.heldout.shape[0])):
        x = data.heldout[i:i + 1]
        for mode in modes:
            y0 = initial_latent(model, Tensor(x), mode, seed + i)
            in_y = invert_y(model, x, mode, steps, y0=y0)
            in_z = invert_z(model, x, y0, steps, init_mode=mode)
            finals[mode].append(in_y.final_loss)
            firsts[mode].append(in_y.initial_loss)
            y_finals.append(in_y.final_loss)
            z_finals.append(in_z.final_loss)
            start_gaps.append(abs(in_y.initial_loss - in_z.initial_loss))
    result = {f"median_{mode}": float(np.median(finals[mode])) for mode in modes}
    result.update({f"median_first_{mode}": float(np.median(firsts[mode])) for mode in modes})
    result.update({
        'median_y': float(np.median(y_finals)),
        'median_z': float(np.median(z_finals)),
        'max_start_gap': float(np.max(start_gaps)),
    })
    ordered = result['median_encoder'] <= result['median_mean'] <= result['median_random']
    encoder_starts_best = result['median_first_encoder'] <= min(result['median_first_mean'],
                                                               result['median_first_random'])
    matched = result['max_start_gap'] <= 1e-4 and result['median_y'] <= result['median_z']
    result['passed'] = float(ordered and encoder_starts_best and matched)
    return result


def gradient_study(config: TrainConfig, stage1: LiaModel, stage2_log, data: Dataset) -> Dict[str, float]:
    """First-layer gradient volatility: variational encoder vs deterministic encoder"""
    vae_log = train_vae_baseline(replace(config, vae_steps=config.stage2_steps), stage1, data)
    lia = summarize_gradients(stage2_log, log_every=config.log_every)
    vae = summarize_gradients(vae_log, log_every=config.log_every)
    window_rows = max(1, SMOOTHING_WINDOW // config.log_every)
    settles = window_means_nonincreasing(stage2_log.losses(), window_rows)
    result = {'lia_first_std': lia['first']['std'], 'vae_first_std': vae['first']['std'],
              'vae_nan_steps': float(vae['first']['nan_steps']),
              'stage2_smoothed_final': float(lia['smoothed_loss'][-1]),
              'stage2_smoothed_nonincreasing': float(settles)}
    result['passed'] = float(result['vae_first_std'] > result['lia_first_std']
                             and result['stage2_smoothed_nonincreasing'])
    return result


def main():
    """Run every study and write one summary table"""
    out_dir = os.path.join(Config.RUNS_DIR, f"experiments-{datetime.now().strftime('%Y%m%d-%H%M%S')}")
    rows: List[Dict[str, object]] = []

    def collect(study: str, seed: int, values: Dict[str, float]):
        for metric, value in values.items():
            rows.append({'study': study, 'metric': metric, 'value': value, 'seed': seed})
        logger.info(f"📊 {study} (seed {seed}): {values}")

    try:
        logger.info(f"🚀 Running experiments for seeds {SEEDS}")
        for seed in SEEDS:
            collect('generation', seed, generation_study(seed))
        seed = SEEDS[0]
        config, data, stage1, model, stage2_log = train_shapes(seed)
        logger.info(f"💾 Memory usage after training: {get_memory_usage():.1f} MB")
        collect('reconstruction', seed, reconstruction_study(model, data, seed))
        collect('disentanglement', seed, disentanglement_study(model, SEEDS))
        collect('inversion', seed, inversion_study(model, data, seed))
        collect('gradient_stability', seed, gradient_study(config, stage1, stage2_log, data))
    except Exception as e:
        logger.error(f"❌ Error during experiments: {e}")
        sys.exit(1)
    finally:
        if rows:
            write_csv(os.path.join(out_dir, 'summary.csv'), pd.DataFrame(rows))
    logger.info(f"✅ Experiments completed; summary in {out_dir}")


if __name__ == "__main__":
    main()
