"""Shape statistics and plane geometry.

Landmark sets live in pixel or crop coordinates; mean shapes live on the
interpretable plane [-1, 1]^2. Everything here is pure numpy and safe to
call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFitError


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (N, 2) point array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2D landmarks for one face with per-landmark validity.

    Invalid entries mark self-occluded landmarks that carry no position;
    their coordinates are ignored everywhere.
    """

    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        coords = _as_points(self.coords)
        valid = np.asarray(self.valid, dtype=bool)
        if coords.shape[0] < 1:
            raise ValueError("a landmark set needs at least one landmark")
        if valid.shape != (coords.shape[0],):
            raise ValueError("coords and valid must have matching length")
        if not np.isfinite(coords[valid]).all():
            raise ValueError("valid landmark coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def all_valid(cls, coords) -> "LandmarkSet":
        coords = _as_points(coords)
        return cls(coords, np.ones(coords.shape[0], dtype=bool))


@dataclass(frozen=True)
class AffineTransform:
    """2D affine map p -> linear @ p + offset."""

    linear: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        linear = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        offset = np.asarray(self.offset, dtype=np.float64).reshape(2)
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2), np.zeros(2))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.offset

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.offset)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """Returns the map p -> self(inner(p))."""
        return AffineTransform(self.linear @ inner.linear,
                               self.linear @ inner.offset + self.offset)


@dataclass(frozen=True)
class MeanShape:
    """Per-dataset statistical shape on the interpretable plane [-1, 1]^2."""

    points: np.ndarray
    dataset_id: str = ""

    def __post_init__(self):
        pts = _as_points(self.points)
        if np.abs(pts).max(initial=0.0) > 1.0 + 1e-12:
            raise ValueError("mean shape coordinates must lie in [-1, 1]")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def mean_canonical_shape(samples: list[LandmarkSet],
                         canonicalizers: list[AffineTransform]) -> np.ndarray:
    """Per-index mean of canonicalized coordinates, before plane normalization.

    Only valid entries contribute to each index; an index valid in no sample
    is an error.
    """
    if not samples:
        raise ValueError("cannot compute a mean shape from an empty sample list")
    if len(canonicalizers) != len(samples):
        raise ValueError("one canonicalizer per sample is required")
    n = len(samples[0])
    total = np.zeros((n, 2), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for lms, tf in zip(samples, canonicalizers):
        if len(lms) != n:
            raise ValueError("all samples must share the same landmark count")
        mapped = tf.apply(lms.coords)
        total[lms.valid] += mapped[lms.valid]
        counts += lms.valid
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"landmark indices valid in no sample: {missing}")
    return total / counts[:, None]


def fit_plane_normalization(points) -> AffineTransform:
    """Uniform scale + translation mapping the tight bounding box of the
    points into [-1, 1]^2, aspect-preserving and centered at the origin.

    Degenerate extents (a single point) translate only.
    """
    pts = _as_points(points)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = (lo + hi) / 2.0
    extent = (hi - lo).max()
    scale = 2.0 / extent if extent > 0 else 1.0
    return AffineTransform(scale * np.eye(2), -scale * center)


def compute_mean_shape(samples: list[LandmarkSet],
                       canonicalizers: list[AffineTransform],
                       dataset_id: str = "") -> MeanShape:
    """Statistical mean shape of a dataset, normalized to the plane.

    Each sample comes with the affine map from its pixel frame to the
    shared crop frame; the per-index mean (valid entries only) is then
    rescaled so its bounding box fits [-1, 1]^2.
    """
    mean = mean_canonical_shape(samples, canonicalizers)
    norm = fit_plane_normalization(mean)
    return MeanShape(norm.apply(mean), dataset_id)


def apply_semantic_offsets(shape: MeanShape, offsets) -> np.ndarray:
    """Mean shape plus per-landmark 2D offsets.

    The result is intentionally not re-clamped to [-1, 1]: the offsets are
    small learned corrections and clamping would break their gradients.
    """
    off = _as_points(offsets)
    if off.shape[0] != len(shape):
        raise ValueError(
            f"offset count {off.shape[0]} != landmark count {len(shape)}")
    return shape.points + off


def fit_affine_alignment(source, target) -> AffineTransform:
    """Least-squares affine A, b minimizing sum ||A s + b - t||^2.

    Needs at least 3 non-collinear source points; otherwise the normal
    equations are rank-deficient and a DegenerateFitError is raised.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    if src.shape != tgt.shape:
        raise ValueError("source and target must have equal shapes")
    if src.shape[0] < 3:
        raise DegenerateFitError(
            f"affine fit needs >= 3 point pairs, got {src.shape[0]}")
    design = np.hstack([src, np.ones((src.shape[0], 1))])
    if np.linalg.matrix_rank(design) < 3:
        raise DegenerateFitError("source points are collinear; affine fit is degenerate")
    solution, _, _, _ = np.linalg.lstsq(design, tgt, rcond=None)
    return AffineTransform(solution[:2].T, solution[2])


def alignment_residual(transform: AffineTransform, source, target) -> float:
    """Sum of squared residuals of an affine alignment."""
    diff = transform.apply(source) - _as_points(target)
    return float((diff ** 2).sum())


def generate_scratch_shape(n_points: int,
                           region=(-1.0, -1.0, 1.0, 1.0),
                           seed: int = 0) -> np.ndarray:
    """Uniform random plane points inside an axis-aligned box.

    Deterministic for a fixed seed. The box is (x_min, y_min, x_max, y_max)
    and may be degenerate (a point) but not inverted.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    x0, y0, x1, y1 = (float(v) for v in region)
    if x1 < x0 or y1 < y0:
        raise ValueError(f"empty region {region}")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(n_points, 2))
    pts[:, 0] = x0 + pts[:, 0] * (x1 - x0)
    pts[:, 1] = y0 + pts[:, 1] * (y1 - y0)
    return pts
