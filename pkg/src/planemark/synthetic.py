"""Procedural face generator with analytic landmark ground truth.

Each face is a handful of parametric curves: an elliptical head outline, two
eye ellipses, a mouth arc (lower section of an ellipse) and a nose point,
all expressed in a face frame that is rotated and translated per sample.
Landmarks are points at fixed curve parameters, so any landmark scheme on
the same curves has exact analytic coordinates for every generated face.

Two built-in schemes share the curves: scheme A (20 landmarks) and scheme B
(12 landmarks, the same curves sampled at constant parametric offsets from
A's grid). That makes B a genuinely different annotation convention of the
same geometry, which is what the zero/few-shot and joint-training
experiments need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .data import DatasetDescriptor, NormSpec, Sample
from .geometry import LandmarkSet

HEAD, LEFT_EYE, RIGHT_EYE, MOUTH, NOSE = "head", "left_eye", "right_eye", "mouth", "nose"

# (curve, parameter) per landmark index
SCHEMES: dict[str, list[tuple[str, float]]] = {
    "A": (
        [(HEAD, k * math.pi / 4.0) for k in range(8)]
        + [(LEFT_EYE, t) for t in (math.pi, math.pi / 2.0, 3.0 * math.pi / 2.0)]
        + [(RIGHT_EYE, t) for t in (0.0, math.pi / 2.0, 3.0 * math.pi / 2.0)]
        + [(MOUTH, s) for s in (0.0, 0.25, 0.5, 0.75, 1.0)]
        + [(NOSE, 0.0)]
    ),
    "B": (
        [(HEAD, math.pi / 8.0 + k * math.pi / 3.0) for k in range(6)]
        + [(LEFT_EYE, math.pi + math.pi / 8.0), (RIGHT_EYE, math.pi / 8.0)]
        + [(MOUTH, s) for s in (0.1, 0.5, 0.9)]
        + [(NOSE, 0.0)]
    ),
}

# scheme A is mirror symmetric; scheme B (offset parameters) is not
FLIP_PERMUTATIONS: dict[str, np.ndarray | None] = {
    "A": np.array([4, 3, 2, 1, 0, 7, 6, 5,
                   11, 12, 13, 8, 9, 10,
                   18, 17, 16, 15, 14, 19]),
    "B": None,
}

NORM_SPECS = {
    "A": NormSpec("ocular", (8,), (11,)),
    "B": NormSpec("ocular", (6,), (7,)),
}

PUPIL_GROUPS = {"A": ((8, 9, 10), (11, 12, 13))}


def scheme_descriptor(scheme: str) -> DatasetDescriptor:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    return DatasetDescriptor(
        dataset_id=f"synth{scheme}",
        num_landmarks=len(SCHEMES[scheme]),
        norm=NORM_SPECS[scheme],
        flip_permutation=FLIP_PERMUTATIONS[scheme],
    )


@dataclass(frozen=True)
class FaceParams:
    """Pose and shape of one synthetic face, in pixel units."""

    center: tuple[float, float]
    angle: float                     # face rotation, radians
    head_axes: tuple[float, float]
    eye_offset: tuple[float, float]  # (dx, dy): eyes at (-dx,-dy), (dx,-dy)
    eye_axes: tuple[float, float]
    mouth_offset: tuple[float, float]
    mouth_axes: tuple[float, float]
    mouth_arc: tuple[float, float]   # ellipse angle range of the arc
    nose_offset: tuple[float, float]


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _face_frame_point(face: FaceParams, local: np.ndarray) -> np.ndarray:
    return np.asarray(face.center) + _rotation(face.angle) @ local


def curve_point(face: FaceParams, curve: str, t: float) -> np.ndarray:
    """Analytic pixel position of curve parameter t on a face."""
    if curve == HEAD:
        a, b = face.head_axes
        return _face_frame_point(face, np.array([a * math.cos(t), b * math.sin(t)]))
    if curve in (LEFT_EYE, RIGHT_EYE):
        dx, dy = face.eye_offset
        sign = -1.0 if curve == LEFT_EYE else 1.0
        ea, eb = face.eye_axes
        local = np.array([sign * dx + ea * math.cos(t), -dy + eb * math.sin(t)])
        return _face_frame_point(face, local)
    if curve == MOUTH:
        th0, th1 = face.mouth_arc
        theta = th0 + t * (th1 - th0)
        mx, my = face.mouth_offset
        ma, mb = face.mouth_axes
        local = np.array([mx + ma * math.cos(theta), my + mb * math.sin(theta)])
        return _face_frame_point(face, local)
    if curve == NOSE:
        return _face_frame_point(face, np.asarray(face.nose_offset))
    raise ValueError(f"unknown curve {curve!r}")


def scheme_landmarks(face: FaceParams, scheme: str) -> np.ndarray:
    """All landmark pixel positions of a scheme on one face."""
    return np.stack([curve_point(face, curve, t) for curve, t in SCHEMES[scheme]])


def random_face(rng: np.random.Generator, image_size: int) -> FaceParams:
    s = float(image_size)
    a = rng.uniform(0.26, 0.34) * s
    b = rng.uniform(0.32, 0.40) * s
    ea = rng.uniform(0.14, 0.20) * a
    ma = rng.uniform(0.35, 0.55) * a
    # symmetric mouth arc on the lower ellipse half, so s <-> 1-s mirrors
    th0 = rng.uniform(0.10, 0.20) * math.pi
    return FaceParams(
        center=tuple(s * (0.5 + rng.uniform(-0.04, 0.04, size=2))),
        angle=math.radians(rng.uniform(-25.0, 25.0)),
        head_axes=(a, b),
        eye_offset=(rng.uniform(0.38, 0.50) * a, rng.uniform(0.25, 0.40) * b),
        eye_axes=(ea, rng.uniform(0.5, 0.8) * ea),
        mouth_offset=(0.0, rng.uniform(0.35, 0.55) * b),
        mouth_axes=(ma, rng.uniform(0.25, 0.50) * ma),
        mouth_arc=(th0, math.pi - th0),
        nose_offset=(rng.uniform(-0.05, 0.05) * a, rng.uniform(0.0, 0.15) * b),
    )


def _draw_curve(canvas: np.ndarray, points: np.ndarray, color, thickness: int,
                closed: bool) -> None:
    bits = 4
    pts = np.round((points - 0.5) * (1 << bits)).astype(np.int32)
    cv2.polylines(canvas, [pts.reshape(-1, 1, 2)], closed, color,
                  thickness=thickness, lineType=cv2.LINE_AA, shift=bits)


def render_face(face: FaceParams, image_size: int,
                rng: np.random.Generator) -> np.ndarray:
    """Rasterize a face; curves are drawn densely enough that every analytic
    curve point sits on painted pixels."""
    bg = rng.uniform(0.80, 0.92)
    tint = rng.uniform(-0.03, 0.03, size=3)
    canvas = np.clip(np.full((image_size, image_size, 3), bg) + tint, 0.0, 1.0)
    canvas = canvas.astype(np.float32)
    ink = float(rng.uniform(0.05, 0.25))
    color = (ink, ink, ink)

    dense = np.linspace(0.0, 2.0 * math.pi, 181)
    head = np.stack([curve_point(face, HEAD, t) for t in dense])
    _draw_curve(canvas, head, color, 2, closed=True)
    for eye in (LEFT_EYE, RIGHT_EYE):
        pts = np.stack([curve_point(face, eye, t) for t in dense[::4]])
        _draw_curve(canvas, pts, color, 1, closed=True)
    mouth = np.stack([curve_point(face, MOUTH, s) for s in np.linspace(0, 1, 61)])
    _draw_curve(canvas, mouth, color, 1, closed=False)
    nose = curve_point(face, NOSE, 0.0)
    cv2.circle(canvas, tuple(np.round((nose - 0.5) * 16).astype(int)), 16,
               color, thickness=-1, lineType=cv2.LINE_AA, shift=4)

    noise = rng.uniform(-0.02, 0.02, size=canvas.shape).astype(np.float32)
    return np.clip(canvas + noise, 0.0, 1.0)


def synth_generate(scheme: str, count: int, seed: int,
                   image_size: int = 64):
    """Generate `count` rendered faces annotated with a scheme.

    Returns (samples, faces): materialized samples with crop-normalized
    landmarks (bbox = whole image), plus the FaceParams enabling analytic
    landmarks for ANY scheme on the same faces. Deterministic per seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    descriptor = scheme_descriptor(scheme)
    rng = np.random.default_rng(seed)
    samples, faces = [], []
    for i in range(count):
        face = random_face(rng, image_size)
        image = render_face(face, image_size, rng)
        coords = scheme_landmarks(face, scheme) / float(image_size)
        samples.append(Sample(
            landmarks=LandmarkSet.all_valid(coords),
            dataset_id=descriptor.dataset_id,
            source=f"synthetic:{scheme}:{seed}:{i}",
            bbox=np.array([0.0, 0.0, float(image_size), float(image_size)]),
            image=image,
        ))
        faces.append(face)
    return samples, faces


def write_synth_dataset(out_dir, scheme: str, count: int, seed: int,
                        image_size: int = 64) -> list[Sample]:
    """Render a dataset to disk: PNG images plus canonical-json annotations."""
    from pathlib import Path

    from .data import export_canonical

    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    samples, _ = synth_generate(scheme, count, seed, image_size)
    on_disk = []
    for i, s in enumerate(samples):
        rel = f"images/{scheme}_{i:05d}.png"
        bgr = cv2.cvtColor((s.image * 255.0).round().astype(np.uint8),
                           cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(out / rel), bgr)
        on_disk.append(Sample(s.landmarks, s.dataset_id, rel, s.bbox, s.image))
    export_canonical(on_disk, out / "annotations.jsonl")
    return on_disk
