#!/usr/bin/env python3
"""
Tests for latent-code inversion in the y-space and the z-space
"""

import numpy as np

from src.coupling import coupling_forward, coupling_inverse
from src.inversion import initial_latent, invert_y, invert_z, mean_latent, reconstruct
from src.model import LiaModel, ModelDims, generator_forward
from src.tensor import Tensor

DIMS = ModelDims(data_dim=8, latent_dim=4, hidden=16, feat_hidden=8, feat_dim=4, coupling_layers=2)


def _model(seed=0, identity_phi=False) -> LiaModel:
    model = LiaModel.init(ModelDims(**vars(DIMS)), seed)
    if not identity_phi:
        rng = np.random.default_rng(seed + 100)
        for layer in model.phi.layers:
            last = layer.tau.weights[-1]
            last.data[...] = rng.standard_normal(last.shape) * 0.3
    return model


def _target(model, seed=1):
    y_star = np.random.default_rng(seed).standard_normal((1, 4)).astype(np.float32)
    return y_star, generator_forward(model, Tensor(y_star)).numpy()


def test_planted_code_starts_at_zero_loss():
    model = _model()
    y_star, x = _target(model)
    result = invert_y(model, x, steps=5, y0=y_star)
    assert result.loss_curve[0] == 0.0
    assert result.final_loss <= result.initial_loss


def test_loss_never_ends_above_start():
    model = _model()
    _, x = _target(model, seed=2)
    for mode in ('random', 'mean', 'encoder'):
        result = invert_y(model, x, mode, steps=30, seed=4)
        assert len(result.loss_curve) == 31
        assert result.final_loss <= result.initial_loss
        assert result.latent.shape == (1, 4)
    z_result = invert_z(model, x, initial_latent(model, Tensor(x), 'random', 4), steps=30)
    assert z_result.final_loss <= z_result.initial_loss


def test_aggressive_learning_rate_rolls_back():
    model = _model()
    _, x = _target(model, seed=3)
    result = invert_y(model, x, 'random', steps=40, lr=50.0, seed=1)
    assert result.final_loss <= result.initial_loss
    assert np.all(np.isfinite(result.latent))


def test_zero_steps_returns_start():
    model = _model()
    _, x = _target(model)
    y0 = initial_latent(model, Tensor(x), 'random', seed=7)
    in_z = invert_z(model, x, y0, steps=0)
    z0 = coupling_forward(model.phi, Tensor(y0)).numpy()
    assert np.array_equal(in_z.latent, z0)
    assert in_z.loss_curve == [in_z.initial_loss]
    in_y = invert_y(model, x, 'random', steps=0, y0=y0)
    assert np.array_equal(in_y.latent, y0)


def test_matched_starts_have_matching_losses():
    model = _model()
    _, x = _target(model, seed=5)
    y0 = initial_latent(model, Tensor(x), 'random', seed=9)
    in_y = invert_y(model, x, 'random', steps=0, y0=y0)
    in_z = invert_z(model, x, y0, steps=0, init_mode='random')
    assert abs(in_y.initial_loss - in_z.initial_loss) < 1e-4


def test_reconstruct_uses_the_right_space():
    model = _model()
    _, x = _target(model, seed=6)
    in_z = invert_z(model, x, initial_latent(model, Tensor(x), 'encoder'), steps=3)
    expected = generator_forward(model, coupling_inverse(model.phi, Tensor(in_z.latent))).numpy()
    assert np.array_equal(reconstruct(model, in_z), expected)
    frame = in_z.to_frame()
    assert list(frame.columns) == ['step', 'loss'] and len(frame) == 4


def test_mean_latent_with_identity_coupling():
    model = _model(identity_phi=True)
    draws = np.random.default_rng(11).standard_normal((500, 4)).astype(np.float32)
    assert np.allclose(mean_latent(model, 500, seed=11).data, draws.mean(axis=0), atol=1e-6)


def test_mean_latent_of_one_draw():
    model = _model()
    z = np.random.default_rng(12).standard_normal((1, 4))
    expected = coupling_inverse(model.phi, Tensor(z)).data[0]
    assert np.allclose(mean_latent(model, 1, seed=12).data, expected)
    try:
        mean_latent(model, 0)
        assert False, "expected ValueError"
    except ValueError:
        pass


def test_mean_init_is_shared_across_rows():
    model = _model()
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(3, 8)))
    start = initial_latent(model, x, 'mean', seed=2)
    assert start.shape == (3, 4) and np.all(start == start[0])


def test_unknown_init_mode():
    model = _model()
    _, x = _target(model)
    for call in (lambda: invert_y(model, x, 'zeros'), lambda: initial_latent(model, Tensor(x), 'zeros')):
        try:
            call()
            assert False, "expected ValueError"
        except ValueError as e:
            assert 'zeros' in str(e)


if __name__ == "__main__":
    print("🧪 Testing inversion")
    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f"✅ {name}")
    print("🎉 Inversion tests completed!")
