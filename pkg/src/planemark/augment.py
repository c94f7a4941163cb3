"""Landmark-consistent augmentation for face crops.

Geometric transforms (translation, rotation, scale, shear, horizontal flip)
are applied through one shared affine map to the image and the landmarks;
photometric transforms (grayscale, brightness) and occlusion leave the
landmarks untouched. All randomness flows through an explicit generator so
parallel workers with split seeds stay reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .data import Sample
from .geometry import LandmarkSet


@dataclass(frozen=True)
class AugmentationConfig:
    translation_px: float = 10.0
    rotation_deg: float = 30.0
    scale_frac: float = 0.05
    hflip_p: float = 0.5
    gray_p: float = 0.2
    brightness_p: float = 0.5
    brightness_mag: float = 0.3
    occlusion_p: float = 0.5
    shear_p: float = 1.0 / 3.0
    shear_mag: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_p", "gray_p", "brightness_p", "occlusion_p", "shear_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        return cls(**d)


def identity_config() -> AugmentationConfig:
    """All probabilities and ranges zeroed; augment becomes a no-op."""
    return AugmentationConfig(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def warp_affine_sample(image: np.ndarray, landmarks_norm: np.ndarray,
                       linear: np.ndarray, offset: np.ndarray):
    """Apply a forward affine map (continuous pixel coords) to both the
    image and crop-normalized landmarks. Returns (image, landmarks_norm)."""
    h, w = image.shape[:2]
    size = np.array([w, h], dtype=np.float64)
    # cv2 places pixel centers at integer coordinates: shift by 0.5 each way
    shift = np.array([0.5, 0.5])
    m = np.hstack([linear, (linear @ shift + offset - shift)[:, None]])
    warped = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    px = landmarks_norm * size
    px = px @ linear.T + offset
    return warped, px / size


def geometric_matrix(size_wh, angle_deg: float, scale: float,
                     shear: tuple[float, float], translation):
    """Forward affine about the crop center: translate(center) . rotate .
    scale . shear . translate(-center), plus an extra pixel translation."""
    w, h = size_wh
    c = np.array([w / 2.0, h / 2.0])
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    sh = np.array([[1.0, shear[0]], [shear[1], 1.0]])
    linear = scale * rot @ sh
    offset = c - linear @ c + np.asarray(translation, dtype=np.float64)
    return linear, offset


def flip_sample(sample: Sample, permutation: np.ndarray) -> Sample:
    """Mirror the crop horizontally and reindex landmarks accordingly."""
    if sample.image is None:
        raise ValueError("sample image must be materialized before flipping")
    perm = np.asarray(permutation, dtype=np.int64)
    coords = sample.landmarks.coords.copy()
    coords[:, 0] = 1.0 - coords[:, 0]
    lms = LandmarkSet(coords[perm], sample.landmarks.valid[perm])
    return Sample(lms, sample.dataset_id, sample.source, sample.bbox,
                  cv2.flip(sample.image, 1))


def augment(sample: Sample, config: AugmentationConfig,
            rng: np.random.Generator,
            flip_permutation: np.ndarray | None = None) -> Sample:
    """Randomized copy of a sample; the input is never modified."""
    if sample.image is None:
        raise ValueError("sample image must be materialized before augmenting")
    image = sample.image
    h, w = image.shape[:2]

    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    scale = 1.0 + rng.uniform(-config.scale_frac, config.scale_frac)
    translation = rng.uniform(-config.translation_px, config.translation_px, size=2)
    shear = (0.0, 0.0)
    if rng.uniform() < config.shear_p:
        shear = tuple(rng.uniform(-config.shear_mag, config.shear_mag, size=2))
    linear, offset = geometric_matrix((w, h), angle, scale, shear, translation)
    image, coords = warp_affine_sample(image, sample.landmarks.coords, linear, offset)
    out = Sample(LandmarkSet(coords, sample.landmarks.valid.copy()),
                 sample.dataset_id, sample.source, sample.bbox, image)

    if rng.uniform() < config.hflip_p:
        if flip_permutation is None:
            raise ValueError(
                f"horizontal flip fired for {sample.dataset_id!r} but the "
                "descriptor has no flip permutation")
        out = flip_sample(out, flip_permutation)

    image = out.image
    if rng.uniform() < config.gray_p:
        image = np.repeat(image.mean(axis=2, keepdims=True), 3, axis=2)
    if rng.uniform() < config.brightness_p:
        delta = rng.uniform(-config.brightness_mag, config.brightness_mag)
        image = np.clip(image + delta, 0.0, 1.0)
    if rng.uniform() < config.occlusion_p:
        # block side uniform in [10%, 30%] of the crop (size law not pinned
        # down by the augmentation recipe; this range is our choice)
        side = int(round(rng.uniform(0.1, 0.3) * min(h, w)))
        side = max(side, 1)
        x0 = int(rng.integers(0, max(w - side, 1)))
        y0 = int(rng.integers(0, max(h - side, 1)))
        image = image.copy()
        image[y0:y0 + side, x0:x0 + side] = rng.uniform(0.0, 1.0, size=3)
    out.image = np.ascontiguousarray(image, dtype=np.float32)
    return out
