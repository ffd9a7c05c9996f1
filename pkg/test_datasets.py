#!/usr/bin/env python3
"""
Tests for the synthetic datasets
"""

import numpy as np

from src.datasets import (IMAGE_SIZE, dataset_from_checkpoint, dataset_to_checkpoint, gen_gaussians2d, gen_shapes,
                          load_dataset, mode_centres, render_shapes, split_heldout)


def test_centred_unrotated_shape_is_mirror_symmetric():
    for scale in (0.0, 0.4, 1.0):
        image = render_shapes(np.array([[0.5, 0.5, scale, 0.0, 1.0]]))[0]
        assert image.shape == (IMAGE_SIZE, IMAGE_SIZE)
        assert np.max(np.abs(image - image[:, ::-1])) < 1e-6


def test_pixels_stay_in_range():
    images = np.stack([s.image for s in gen_shapes(20, seed=3)])
    assert images.dtype == np.float32
    assert images.min() >= -1.0 and images.max() <= 1.0


def test_same_seed_is_bit_identical():
    a, b = gen_shapes(8, seed=11), gen_shapes(8, seed=11)
    for left, right in zip(a, b):
        assert left.image.tobytes() == right.image.tobytes()
        assert left.factors.tobytes() == right.factors.tobytes()
    assert not np.array_equal(a[0].image, gen_shapes(8, seed=12)[0].image)


def test_brightness_grows_with_intensity():
    intensities = np.linspace(0.0, 1.0, 6)
    factors = np.array([[0.3, 0.6, 0.5, 0.25, i] for i in intensities])
    means = render_shapes(factors).mean(axis=(1, 2))
    assert np.all(np.diff(means) > 0)


def test_rendering_is_chunk_independent():
    factors = np.random.default_rng(0).random((300, 5))
    together = render_shapes(factors)
    one_by_one = np.stack([render_shapes(row[None])[0] for row in factors[256:261]])
    assert np.array_equal(together[256:261], one_by_one)


def test_single_mode_without_noise():
    points = gen_gaussians2d(10, k_modes=1, radius=2.0, sigma=0.0, seed=0)
    assert all(np.allclose(p, [2.0, 0.0]) for p in points)


def test_mixture_mean_is_near_origin():
    points = np.stack(gen_gaussians2d(100000, k_modes=8, radius=2.0, sigma=0.02, seed=5))
    bound = 4.0 * points.std(axis=0) / np.sqrt(points.shape[0])
    assert np.all(np.abs(points.mean(axis=0)) < bound)


def test_mode_centres_lie_on_circle():
    centres = mode_centres(8, 2.0)
    assert np.allclose(np.linalg.norm(centres, axis=1), 2.0)


def test_gaussians_are_seeded():
    a = np.stack(gen_gaussians2d(50, 8, 2.0, 0.02, seed=1))
    b = np.stack(gen_gaussians2d(50, 8, 2.0, 0.02, seed=1))
    assert a.tobytes() == b.tobytes()


def test_heldout_is_last_tenth():
    rows = np.arange(40, dtype=np.float32).reshape(20, 2)
    train, heldout = split_heldout(rows)
    assert train.shape == (18, 2) and heldout.shape == (2, 2)
    assert np.array_equal(heldout, rows[18:])
    try:
        split_heldout(rows[:1])
        assert False, "expected ValueError"
    except ValueError:
        pass


def test_load_dataset():
    shapes = load_dataset('shapes', 30, seed=2)
    assert shapes.is_image and shapes.data_dim == IMAGE_SIZE * IMAGE_SIZE
    assert shapes.train.shape[0] + shapes.heldout.shape[0] == 30
    assert shapes.factors.shape == (shapes.train.shape[0], 5)
    # background pixels sit at -1, which a unit tanh head only reaches at saturation
    assert shapes.output_scale > np.abs(shapes.train).max()

    gaussians = load_dataset('gaussians', 100, seed=2)
    assert not gaussians.is_image and gaussians.data_dim == 2
    assert gaussians.output_scale > np.abs(gaussians.train).max()

    try:
        load_dataset('faces')
        assert False, "expected ValueError"
    except ValueError as e:
        assert 'faces' in str(e)


def test_dataset_checkpoint_round_trip():
    for name in ('shapes', 'gaussians'):
        data = load_dataset(name, 20, seed=0)
        restored = dataset_from_checkpoint(dataset_to_checkpoint(data))
        assert restored.name == name
        assert restored.image_shape == data.image_shape
        assert np.isclose(restored.output_scale, data.output_scale)
        assert np.array_equal(restored.train, data.train)
        assert np.array_equal(restored.heldout, data.heldout)


if __name__ == "__main__":
    print("🧪 Testing datasets")
    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f"✅ {name}")
    print("🎉 Dataset tests completed!")
