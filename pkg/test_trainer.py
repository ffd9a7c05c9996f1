#!/usr/bin/env python3
"""
Tests for the two-stage trainer and the variational baseline.
Tiny networks and a handful of steps: these check contracts, not quality.
"""

from dataclasses import replace

import numpy as np

from src.datasets import load_dataset
from src.losses import LossWeights
from src.model import ModelDims
from src.optim import Adam
from src.tensor import NonFiniteError, Tensor
from src.trainer import (NAN_PATIENCE, STREAM_WARMUP, GradLog, TrainConfig, TrainingDivergedError, build_model,
                         smooth, summarize_gradients, train_stage1, train_stage2, train_vae_baseline,
                         warm_start_encoder, window_means_nonincreasing)

TINY = ModelDims(latent_dim=4, hidden=16, feat_hidden=8, feat_dim=4, coupling_layers=2)


def _config(**overrides) -> TrainConfig:
    base = TrainConfig(seed=3, batch_size=8, stage1_steps=4, stage2_steps=4, vae_steps=4, dims=TINY,
                       log_every=2, feature_steps=3, encoder_warmup_steps=2, dataset='shapes')
    return replace(base, **overrides)


def _snapshot(model, *names):
    return {name: tensor.data.copy() for name, tensor in model.parameters(*names).items()}


def _same(a, b) -> bool:
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


_SHAPES = None


def _shapes():
    global _SHAPES
    if _SHAPES is None:
        _SHAPES = load_dataset('shapes', 40, seed=0)
    return _SHAPES


def test_config_validation():
    for bad in (dict(stage1_steps=-1), dict(lr_g=0.0), dict(feature_mode='learned'),
                dict(weights=LossWeights(gamma=-1.0))):
        try:
            _config(**bad).validate()
            assert False, f"expected ValueError for {bad}"
        except ValueError:
            pass


def test_zero_steps_leave_model_unchanged():
    config = _config(stage1_steps=0, stage2_steps=0)
    data = _shapes()
    model = build_model(config, data)
    before = _snapshot(model)
    model, log = train_stage1(config, data, model)
    model, log2 = train_stage2(config, model, data)
    assert _same(before, _snapshot(model))
    assert len(log) == 0 and len(log2) == 0


def test_stage1_trains_decoder_only():
    config = _config()
    data = _shapes()
    model = build_model(config, data)
    frozen = _snapshot(model, 'f', 'eps')
    decoder = _snapshot(model, 'g')
    model, log = train_stage1(config, data, model)
    assert _same(frozen, _snapshot(model, 'f', 'eps'))
    assert not _same(decoder, _snapshot(model, 'g'))
    assert log.steps == [0, 2, 3]


def test_stage2_freezes_decoder_and_features():
    config = _config()
    data = _shapes()
    model, _ = train_stage1(config, data)
    frozen = _snapshot(model, 'phi', 'g', 'eps')
    encoder = _snapshot(model, 'f')
    critic = _snapshot(model, 'c')
    model, log = train_stage2(config, model, data)
    assert _same(frozen, _snapshot(model, 'phi', 'g', 'eps'))
    assert not _same(encoder, _snapshot(model, 'f'))
    assert not _same(critic, _snapshot(model, 'c'))
    assert log.layers == model.f.layer_names
    assert np.all(np.isfinite(log.recons()))


def test_training_is_deterministic():
    config = _config()
    data = _shapes()
    runs = []
    for _ in range(2):
        model, _ = train_stage1(config, data)
        model, log = train_stage2(config, model, data)
        runs.append((_snapshot(model), log.to_frame()))
    assert _same(runs[0][0], runs[1][0])
    assert runs[0][1].equals(runs[1][1])


def test_stage2_needs_a_bottleneck():
    data = load_dataset('gaussians', 50, seed=0)
    config = _config(dataset='gaussians', stage1_steps=0, feature_steps=0)
    model, _ = train_stage1(config, data)
    try:
        train_stage2(config, model, data)
        assert False, "expected ValueError"
    except ValueError as e:
        assert 'latent_dim' in str(e)


class _FlakyGenerator:
    """Wraps g and fails the listed calls (1-based) with a non-finite error"""

    def __init__(self, g, failing_calls):
        self.g = g
        self.failing_calls = set(failing_calls)
        self.calls = 0

    def __call__(self, y):
        self.calls += 1
        if self.calls in self.failing_calls:
            raise NonFiniteError("matmul produced non-finite values")
        return self.g(y)


def test_stage1_aborts_on_non_finite_loss():
    config = _config(feature_steps=0)
    data = _shapes()
    model = build_model(config, data)
    model.g.weights[-1].data[0, 0] = np.nan
    try:
        train_stage1(config, data, model)
        assert False, "expected TrainingDivergedError"
    except TrainingDivergedError as e:
        assert e.stage == 'stage 1' and e.step == 0


def test_stage2_aborts_on_non_finite_loss():
    config = _config(stage1_steps=1, encoder_warmup_steps=0)
    data = _shapes()
    model, _ = train_stage1(config, data)
    model.g = _FlakyGenerator(model.g, failing_calls=[5])
    try:
        train_stage2(config, model, data)
        assert False, "expected TrainingDivergedError"
    except TrainingDivergedError as e:
        # two generator calls per step, so the fifth is the first call of step 2
        assert e.stage == 'stage 2' and e.step == 2


def test_encoder_warm_start_fits_generated_codes():
    config = _config(stage1_steps=1, encoder_warmup_steps=200)
    data = _shapes()
    model, _ = train_stage1(config, data)
    decoder = _snapshot(model, 'phi', 'g')
    untouched = model.f.copy()
    first = warm_start_encoder(model, model.f.copy(), replace(config, encoder_warmup_steps=1), STREAM_WARMUP)
    last = warm_start_encoder(model, model.f, config, STREAM_WARMUP)
    assert np.isfinite(first) and last < first
    assert _same(decoder, _snapshot(model, 'phi', 'g'))
    assert not np.array_equal(untouched.weights[0].data, model.f.weights[0].data)
    try:
        warm_start_encoder(model, model.f, config, STREAM_WARMUP, target='x')
        assert False, "expected ValueError"
    except ValueError:
        pass


def test_stage2_learning_rates_decay_linearly():
    config = _config(lr_floor=0.1)
    assert config.stage2_lr(1e-3, 0, 11) == 1e-3
    assert np.isclose(config.stage2_lr(1e-3, 10, 11), 1e-4)
    assert np.isclose(config.stage2_lr(1e-3, 5, 11), 5.5e-4)
    assert config.stage2_lr(1e-3, 0, 1) == 1e-3


def test_path_length_weight_defaults_by_dataset():
    assert _config().path_length_weight() > 0
    assert _config(dataset='gaussians').path_length_weight() == 0.0
    assert _config(pl_weight=0.5).path_length_weight() == 0.5
    for bad in (dict(pl_weight=-1.0), dict(pl_every=0), dict(lr_floor=0.0), dict(encoder_warmup_steps=-1)):
        try:
            _config(**bad).validate()
            assert False, f"expected ValueError for {bad}"
        except ValueError:
            pass


def test_stage1_without_path_length_regularizer_runs():
    config = _config(pl_weight=0.0)
    data = _shapes()
    model, log = train_stage1(config, data)
    assert log.steps == [0, 2, 3]
    assert np.all(np.isfinite(log.losses()))


def test_vae_baseline_log_schema():
    config = _config(vae_steps=5, log_every=2)
    data = _shapes()
    model, _ = train_stage1(config, data)
    before = _snapshot(model)
    log = train_vae_baseline(config, model, data)
    assert _same(before, _snapshot(model))
    frame = log.to_frame()
    assert list(frame.columns) == GradLog.COLUMNS
    assert log.steps == [0, 2, 4]
    assert len(frame) == 3 * len(log.layers)
    assert all(layer.startswith('q.') for layer in log.layers)


def test_vae_baseline_records_non_finite_steps_and_continues():
    config = _config(stage1_steps=1, vae_steps=6, encoder_warmup_steps=0, log_every=2)
    data = _shapes()
    model, _ = train_stage1(config, data)
    # two generator calls per step; calls 1-3 fail steps 0, 1 and 2
    model.g = _FlakyGenerator(model.g, failing_calls=[1, 2, 3])
    log = train_vae_baseline(config, model, data)
    losses = log.losses()
    assert log.steps == [0, 2, 4, 5]
    assert np.isnan(losses[0]) and np.isnan(losses[1])
    assert np.all(np.isfinite(losses[2:]))
    assert summarize_gradients(log)['first']['nan_steps'] == 2


def test_vae_baseline_aborts_after_patience():
    config = _config(stage1_steps=1, vae_steps=NAN_PATIENCE + 5, encoder_warmup_steps=0)
    data = _shapes()
    model, _ = train_stage1(config, data)
    model.g = _FlakyGenerator(model.g, failing_calls=range(1, 1000))
    try:
        train_vae_baseline(config, model, data)
        assert False, "expected TrainingDivergedError"
    except TrainingDivergedError as e:
        assert e.stage == 'vae baseline' and e.step == NAN_PATIENCE - 1


def test_vae_baseline_variants_run():
    data = _shapes()
    model, _ = train_stage1(_config(stage1_steps=1), data)
    for overrides in (dict(kl_weight=0.0), dict(noise_scale=0.0)):
        log = train_vae_baseline(_config(**overrides), model, data)
        assert len(log) > 0


def test_diverged_error_names_stage_and_step():
    error = TrainingDivergedError('stage 2', 17, 'loss is nan')
    assert error.stage == 'stage 2' and error.step == 17
    assert 'step 17' in str(error) and 'nan' in str(error)


def test_grad_log_records_per_layer():
    log = GradLog('demo')
    grads = {'f.0.weight': np.array([[1.0, -3.0]]), 'f.0.bias': np.array([[2.0]]), 'f.1.weight': np.array([[-4.0]])}
    log.record(0, ['f.0', 'f.1'], grads, loss=1.5, recon=0.5)
    log.record(5, ['f.0', 'f.1'], {}, loss=float('nan'))
    assert np.allclose(log.series('f.0')[:1], [2.0])
    assert np.isnan(log.series('f.1')[1])
    assert log.losses()[0] == 1.5 and log.recons()[0] == 0.5
    summary = summarize_gradients(log, window=2)
    assert summary['first']['layer'] == 'f.0' and summary['last']['layer'] == 'f.1'
    assert summary['first']['nan_steps'] == 1
    try:
        summarize_gradients(GradLog('empty'))
        assert False, "expected ValueError"
    except ValueError:
        pass


def test_smoothing_and_monotonicity():
    assert np.allclose(smooth(np.array([1.0, 3.0, 5.0]), window=2), [1.0, 2.0, 4.0])
    decreasing = np.linspace(1.0, 0.1, 50)
    assert window_means_nonincreasing(decreasing, window=5)
    assert window_means_nonincreasing(np.concatenate([[0.0, 5.0], decreasing]), window=5, skip_fraction=0.1)
    # noise-free windows get no allowance, so the smallest rise counts
    flat_then_up = np.concatenate([np.full(25, 0.1), np.full(25, 0.1 + 1e-9)])
    assert not window_means_nonincreasing(flat_then_up, window=5)


def test_window_means_tolerate_noise_but_not_trends():
    steps = np.arange(500)
    noise = 0.05 * np.where(steps % 2, 1.0, -1.0)
    assert window_means_nonincreasing(1.0 / (1.0 + steps / 50.0) + noise, window=20)
    assert window_means_nonincreasing(np.full(500, 0.3) + noise, window=20)
    # window=1 reads the raw curve, which rises at every other step
    assert not window_means_nonincreasing(np.full(500, 0.3) + noise, window=1)
    rising = 0.3 + 0.01 * steps + noise
    assert not window_means_nonincreasing(rising, window=20)
    # the first skip_fraction is ignored
    early_spike = np.concatenate([np.linspace(0.0, 5.0, 50), np.full(450, 0.3) + noise[:450]])
    assert window_means_nonincreasing(early_spike, window=20)
    assert window_means_nonincreasing(np.array([1.0, 2.0]), window=20)


def test_adam_first_step_moves_by_lr():
    weights = Tensor(np.array([1.0, -2.0, 0.5]))
    frozen = Tensor(np.array([3.0]))
    optimizer = Adam({'w': weights, 'f': frozen}, lr=0.1)
    optimizer.step({'w': Tensor(np.array([4.0, -0.5, 0.0])), 'f': None})
    assert np.allclose(weights.data, [0.9, -1.9, 0.5], atol=1e-6)
    assert frozen.data[0] == 3.0
    optimizer.reset()
    assert optimizer.t == 0 and not np.any(optimizer.m['w'])
    try:
        Adam({'w': weights}, lr=0.0)
        assert False, "expected ValueError"
    except ValueError:
        pass


if __name__ == "__main__":
    print("🧪 Testing trainer")
    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f"✅ {name}")
    print("🎉 Trainer tests completed!")
