import numpy as np
import pytest

from planemark.augment import (AugmentationConfig, augment, flip_sample,
                               geometric_matrix, identity_config,
                               warp_affine_sample)
from planemark.data import Sample
from planemark.geometry import LandmarkSet
from planemark.synthetic import FLIP_PERMUTATIONS, synth_generate


def get_sample(seed=0, size=64):
    samples, _ = synth_generate("A", 1, seed=seed, image_size=size)
    return samples[0]


def test_config_validation_and_defaults():
    cfg = AugmentationConfig()
    assert cfg.translation_px == 10.0
    assert cfg.rotation_deg == 30.0
    assert cfg.scale_frac == 0.05
    assert cfg.hflip_p == 0.5 and cfg.gray_p == 0.2
    assert cfg.brightness_p == 0.5 and cfg.brightness_mag == 0.3
    assert cfg.occlusion_p == 0.5
    assert cfg.shear_p == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        AugmentationConfig(hflip_p=1.5)
    assert AugmentationConfig.from_dict(cfg.to_dict()) == cfg


def test_identity_config_is_noop():
    sample = get_sample()
    out = augment(sample, identity_config(), np.random.default_rng(0))
    np.testing.assert_allclose(out.landmarks.coords, sample.landmarks.coords,
                               atol=1e-12)
    np.testing.assert_allclose(out.image, sample.image, atol=1e-6)
    assert out is not sample


def test_pure_rotation_moves_landmark_as_specified():
    # 90 degree rotation about the center carries (0.75, 0.5) to (0.5, 0.75)
    sample = get_sample()
    h, w = sample.image.shape[:2]
    linear, offset = geometric_matrix((w, h), 90.0, 1.0, (0.0, 0.0), (0.0, 0.0))
    _, coords = warp_affine_sample(sample.image, np.array([[0.75, 0.5]]),
                                   linear, offset)
    np.testing.assert_allclose(coords[0], [0.5, 0.75], atol=1e-12)


def test_flip_is_involution():
    sample = get_sample()
    perm = FLIP_PERMUTATIONS["A"]
    twice = flip_sample(flip_sample(sample, perm), perm)
    np.testing.assert_allclose(twice.landmarks.coords, sample.landmarks.coords,
                               atol=1e-9)
    np.testing.assert_array_equal(twice.image, sample.image)


def test_flip_requires_permutation():
    sample = get_sample()
    cfg = AugmentationConfig(0, 0, 0, hflip_p=1.0, gray_p=0, brightness_p=0,
                             brightness_mag=0, occlusion_p=0, shear_p=0,
                             shear_mag=0)
    with pytest.raises(ValueError, match="flip"):
        augment(sample, cfg, np.random.default_rng(0))
    out = augment(sample, cfg, np.random.default_rng(0),
                  flip_permutation=FLIP_PERMUTATIONS["A"])
    assert out.landmarks.coords[:, 0].mean() == pytest.approx(
        1.0 - sample.landmarks.coords[:, 0].mean(), abs=1e-12)


def test_painted_dot_follows_landmark():
    # geometric consistency: a dot painted at a landmark lands within 1 px
    # of the transformed landmark
    sample = get_sample(seed=3, size=64)
    lm = sample.landmarks.coords[19]  # nose, interior point
    img = sample.image.copy()
    px = lm * 64
    x, y = int(px[0]), int(px[1])
    img[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2] = [1.0, 0.0, 0.0]
    marked = Sample(sample.landmarks, sample.dataset_id, sample.source,
                    sample.bbox, img)
    cfg = AugmentationConfig(translation_px=5, rotation_deg=25, scale_frac=0.05,
                             hflip_p=0, gray_p=0, brightness_p=0,
                             brightness_mag=0, occlusion_p=0, shear_p=1.0,
                             shear_mag=0.05)
    for seed in range(5):
        out = augment(marked, cfg, np.random.default_rng(seed))
        red = (out.image[..., 0] > 0.6) & (out.image[..., 1] < 0.4)
        assert red.any()
        ys, xs = np.nonzero(red)
        centroid = np.array([xs.mean() + 0.5, ys.mean() + 0.5]) / 64
        dist_px = np.linalg.norm((centroid - out.landmarks.coords[19]) * 64)
        assert dist_px < 1.0


def test_photometric_transforms_leave_landmarks_alone():
    sample = get_sample(seed=4)
    cfg = AugmentationConfig(0, 0, 0, hflip_p=0, gray_p=1.0, brightness_p=1.0,
                             brightness_mag=0.3, occlusion_p=0, shear_p=0,
                             shear_mag=0)
    out = augment(sample, cfg, np.random.default_rng(1))
    np.testing.assert_allclose(out.landmarks.coords, sample.landmarks.coords,
                               atol=1e-12)
    # grayscale collapses channels
    assert np.allclose(out.image[..., 0], out.image[..., 1])
    assert not np.allclose(out.image, sample.image)
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_occlusion_paints_a_block():
    sample = get_sample(seed=5)
    cfg = AugmentationConfig(0, 0, 0, hflip_p=0, gray_p=0, brightness_p=0,
                             brightness_mag=0, occlusion_p=1.0, shear_p=0,
                             shear_mag=0)
    out = augment(sample, cfg, np.random.default_rng(2))
    diff = np.abs(out.image - sample.image).sum(axis=2)
    changed = diff > 1e-6
    h, w = changed.shape
    frac = changed.sum() / (h * w)
    assert 0.005 < frac < 0.15  # block side in [10%, 30%] of the crop
    ys, xs = np.nonzero(changed)
    assert (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1) == changed.sum()


def test_augmentation_determinism():
    sample = get_sample(seed=6)
    cfg = AugmentationConfig(seed=0)
    a = augment(sample, cfg, np.random.default_rng(33),
                flip_permutation=FLIP_PERMUTATIONS["A"])
    b = augment(sample, cfg, np.random.default_rng(33),
                flip_permutation=FLIP_PERMUTATIONS["A"])
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.landmarks.coords, b.landmarks.coords)


def test_augment_requires_materialized_image():
    sample = get_sample()
    bare = Sample(sample.landmarks, sample.dataset_id, sample.source, sample.bbox)
    with pytest.raises(ValueError, match="materialized"):
        augment(bare, identity_config(), np.random.default_rng(0))
