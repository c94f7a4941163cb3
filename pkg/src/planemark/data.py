"""Dataset descriptors, canonical annotation format, importers and batching.

Coordinate conventions used throughout:
  * source-image pixel coordinates are continuous, origin at the top-left
    corner of the top-left pixel (a pixel (i, j) has center (i+0.5, j+0.5));
  * a sample's landmarks are stored crop-normalized: (p - bbox_xy) / bbox_wh,
    so valid in-crop coordinates lie in [0, 1]^2. Valid landmarks outside
    the crop keep their out-of-range values; they are flagged, not dropped.

The canonical annotation format is line-delimited JSON, one face per line:
  {"image": path, "dataset_id": id, "bbox": [x, y, w, h],
   "points": [[x, y, valid], ...]}                 (points in source pixels)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import DataFormatError
from .geometry import LandmarkSet, MeanShape

NORM_MODES = ("ocular", "pupil", "box")


@dataclass(frozen=True)
class NormSpec:
    """How the NME normalization distance is obtained for a dataset.

    ocular: distance between the two outer eye corner landmarks (one index
    per side). pupil: distance between pupil points; schemes without pupil
    annotations use the centroid of each eye's landmark group. box: the
    geometric mean sqrt(W*H) of the labeled face box.
    """

    mode: str
    indices_a: tuple[int, ...] = ()
    indices_b: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode not in NORM_MODES:
            raise ValueError(f"norm mode must be one of {NORM_MODES}")
        object.__setattr__(self, "indices_a", tuple(int(i) for i in self.indices_a))
        object.__setattr__(self, "indices_b", tuple(int(i) for i in self.indices_b))
        if self.mode == "ocular" and (len(self.indices_a) != 1 or len(self.indices_b) != 1):
            raise ValueError("ocular normalization needs exactly one index per side")
        if self.mode == "pupil" and (not self.indices_a or not self.indices_b):
            raise ValueError("pupil normalization needs a landmark group per side")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "indices_a": list(self.indices_a),
                "indices_b": list(self.indices_b)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormSpec":
        return cls(d["mode"], tuple(d.get("indices_a", ())), tuple(d.get("indices_b", ())))


@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_id: str
    num_landmarks: int
    norm: NormSpec
    flip_permutation: np.ndarray | None = None
    mean_shape: MeanShape | None = None

    def __post_init__(self):
        if self.num_landmarks < 1:
            raise ValueError("num_landmarks must be >= 1")
        for idx in self.norm.indices_a + self.norm.indices_b:
            if not 0 <= idx < self.num_landmarks:
                raise ValueError(f"normalization index {idx} out of range")
        if self.flip_permutation is not None:
            perm = np.asarray(self.flip_permutation, dtype=np.int64)
            if sorted(perm.tolist()) != list(range(self.num_landmarks)):
                raise ValueError("flip permutation must permute all landmark indices")
            if not np.array_equal(perm[perm], np.arange(self.num_landmarks)):
                raise ValueError("flip permutation must be an involution")
            object.__setattr__(self, "flip_permutation", perm)
        if self.mean_shape is not None and len(self.mean_shape) != self.num_landmarks:
            raise ValueError("mean shape size does not match num_landmarks")

    def with_mean_shape(self, shape: MeanShape) -> "DatasetDescriptor":
        return replace(self, mean_shape=shape)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "num_landmarks": self.num_landmarks,
            "norm": self.norm.to_dict(),
            "flip_permutation": None if self.flip_permutation is None
            else self.flip_permutation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetDescriptor":
        return cls(d["dataset_id"], int(d["num_landmarks"]),
                   NormSpec.from_dict(d["norm"]),
                   None if d.get("flip_permutation") is None
                   else np.asarray(d["flip_permutation"], dtype=np.int64))


@dataclass
class Sample:
    """One annotated face crop. The image loads lazily via load_image."""

    landmarks: LandmarkSet
    dataset_id: str
    source: str
    bbox: np.ndarray = field(default_factory=lambda: np.zeros(4))
    image: np.ndarray | None = None

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise DataFormatError(f"sample {self.source!r} has a degenerate bbox")

    def pixel_landmarks(self) -> np.ndarray:
        """Landmarks back in source-image pixel coordinates."""
        return self.landmarks.coords * self.bbox[2:] + self.bbox[:2]


def normalize_to_crop(points_px: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    bbox = np.asarray(bbox, dtype=np.float64)
    return (np.asarray(points_px, dtype=np.float64) - bbox[:2]) / bbox[2:]


def crop_to_size(image: np.ndarray, bbox, size: tuple[int, int]) -> np.ndarray:
    """Resample the bbox region of a source image to (H, W), unit floats."""
    h, w = size
    x, y, bw, bh = (float(v) for v in np.asarray(bbox, dtype=np.float64))
    sx, sy = w / bw, h / bh
    # forward map in cv2 coords (pixel centers at integers)
    m = np.array([[sx, 0.0, (0.5 - x) * sx - 0.5],
                  [0.0, sy, (0.5 - y) * sy - 0.5]])
    img = np.asarray(image, dtype=np.float32)
    if img.max(initial=0.0) > 1.5:
        img = img / 255.0
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REPLICATE)


def load_image(sample: Sample, size: tuple[int, int],
               root: Path | str = ".") -> np.ndarray:
    """Materialize the sample's crop at the requested (H, W), caching it."""
    if sample.image is not None and sample.image.shape[:2] == tuple(size):
        return sample.image
    path = Path(root) / sample.source
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DataFormatError(f"cannot read image {path}")
    raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    sample.image = crop_to_size(raw, sample.bbox, size)
    return sample.image


# ----- canonical JSON lines -----

def export_canonical(samples: list[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            record = {
                "image": s.source,
                "dataset_id": s.dataset_id,
                "bbox": [float(v) for v in s.bbox],
                "points": [[float(x), float(y), bool(v)]
                           for (x, y), v in zip(s.pixel_landmarks(), s.landmarks.valid)],
            }
            fh.write(json.dumps(record) + "\n")


def _import_canonical(path) -> list[Sample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                pts = np.asarray([[p[0], p[1]] for p in record["points"]], dtype=np.float64)
                valid = np.asarray([bool(p[2]) for p in record["points"]])
                bbox = np.asarray(record["bbox"], dtype=np.float64)
                samples.append(Sample(
                    landmarks=LandmarkSet(normalize_to_crop(pts, bbox), valid),
                    dataset_id=record["dataset_id"],
                    source=record["image"],
                    bbox=bbox,
                ))
            except (KeyError, IndexError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return samples


def _import_wflw_txt(path, dataset_id: str) -> list[Sample]:
    """WFLW community layout: per line 196 landmark coords, 4 bbox corners
    (x_min y_min x_max y_max), 6 attribute flags, image path."""
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 196 + 4 + 6 + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 207 fields, got {len(parts)}")
            try:
                coords = np.asarray(parts[:196], dtype=np.float64).reshape(98, 2)
                x0, y0, x1, y1 = (float(v) for v in parts[196:200])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from exc
            if x1 <= x0 or y1 <= y0:
                raise DataFormatError(f"{path}:{lineno}: inverted bbox")
            bbox = np.array([x0, y0, x1 - x0, y1 - y0])
            samples.append(Sample(
                landmarks=LandmarkSet.all_valid(normalize_to_crop(coords, bbox)),
                dataset_id=dataset_id,
                source=parts[-1],
                bbox=bbox,
            ))
    return samples


def _parse_pts_file(path) -> np.ndarray:
    """Classic .pts landmark file; coordinates are 1-based in the wild and
    are shifted to 0-based here."""
    lines = [ln.strip() for ln in open(path) if ln.strip()]
    try:
        header = dict(ln.split(":") for ln in lines[:2])
        n = int(header["n_points"])
        start = lines.index("{") + 1
        coords = np.asarray([ln.split() for ln in lines[start:start + n]],
                            dtype=np.float64)
    except (KeyError, ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: malformed pts file ({exc})") from exc
    if coords.shape != (n, 2):
        raise DataFormatError(f"{path}: expected {n} points, got {coords.shape}")
    return coords - 1.0


def _import_300w_pts(path, dataset_id: str, pad: float = 0.05) -> list[Sample]:
    """Import one .pts file or a directory of them. The format carries no
    face box, so a tight landmark box padded by `pad` per side is used."""
    path = Path(path)
    files = sorted(path.glob("*.pts")) if path.is_dir() else [path]
    if not files:
        raise DataFormatError(f"no .pts files under {path}")
    samples = []
    for f in files:
        pts = _parse_pts_file(f)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        margin = (hi - lo) * pad
        bbox = np.concatenate([lo - margin, hi - lo + 2 * margin])
        image = None
        for ext in (".png", ".jpg", ".jpeg"):
            if f.with_suffix(ext).exists():
                image = str(f.with_suffix(ext))
                break
        samples.append(Sample(
            landmarks=LandmarkSet.all_valid(normalize_to_crop(pts, bbox)),
            dataset_id=dataset_id,
            source=image or str(f),
            bbox=bbox,
        ))
    return samples


IMPORT_FORMATS = ("canonical-json", "wflw-txt", "300w-pts")


def import_annotations(path, format_id: str,
                       descriptor: DatasetDescriptor | None = None,
                       dataset_id: str = "") -> list[Sample]:
    """Parse an annotation file into sample descriptors (images stay lazy).

    When a descriptor is given, every record must match its landmark count
    and the records adopt its dataset_id.
    """
    if not Path(path).exists():
        raise DataFormatError(f"annotation path {path} does not exist")
    if descriptor is not None:
        dataset_id = descriptor.dataset_id
    if format_id == "canonical-json":
        samples = _import_canonical(path)
        if dataset_id:
            samples = [replace_dataset_id(s, dataset_id) for s in samples]
    elif format_id == "wflw-txt":
        samples = _import_wflw_txt(path, dataset_id or "wflw")
    elif format_id == "300w-pts":
        samples = _import_300w_pts(path, dataset_id or "300w")
    else:
        raise DataFormatError(f"unknown annotation format {format_id!r}")
    if descriptor is not None:
        for i, s in enumerate(samples):
            if len(s.landmarks) != descriptor.num_landmarks:
                raise DataFormatError(
                    f"record {i} has {len(s.landmarks)} landmarks, descriptor "
                    f"{descriptor.dataset_id!r} declares {descriptor.num_landmarks}")
    return samples


def replace_dataset_id(sample: Sample, dataset_id: str) -> Sample:
    return Sample(sample.landmarks, dataset_id, sample.source, sample.bbox, sample.image)


# ----- registry and batching -----

class DatasetRegistry:
    """Ordered collection of (descriptor, samples) pairs keyed by dataset id."""

    def __init__(self):
        self._entries: dict[str, tuple[DatasetDescriptor, list[Sample]]] = {}

    def add(self, descriptor: DatasetDescriptor, samples: list[Sample]) -> None:
        if descriptor.dataset_id in self._entries:
            raise ValueError(f"dataset {descriptor.dataset_id!r} already registered")
        for s in samples:
            if len(s.landmarks) != descriptor.num_landmarks:
                raise DataFormatError(
                    f"sample {s.source!r} has {len(s.landmarks)} landmarks, "
                    f"descriptor declares {descriptor.num_landmarks}")
        self._entries[descriptor.dataset_id] = (descriptor, list(samples))

    def ids(self) -> list[str]:
        return list(self._entries)

    def descriptor(self, dataset_id: str) -> DatasetDescriptor:
        return self._entries[dataset_id][0]

    def samples(self, dataset_id: str) -> list[Sample]:
        return self._entries[dataset_id][1]

    def set_descriptor(self, descriptor: DatasetDescriptor) -> None:
        _, samples = self._entries[descriptor.dataset_id]
        self._entries[descriptor.dataset_id] = (descriptor, samples)

    def items(self):
        return self._entries.items()

    def __contains__(self, dataset_id: str) -> bool:
        return dataset_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def make_batches(registry: DatasetRegistry, batch_size: int, n_anchors: int,
                 seed: int):
    """One epoch of mixed-dataset batches.

    Yields lists of (sample, anchor_indices). Every sample appears exactly
    once per epoch; each sample draws its own uniform anchor subset of size
    n_anchors (sorted). Deterministic for a fixed seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(registry) == 0:
        raise ValueError("registry is empty")
    min_count = min(d.num_landmarks for _, (d, _) in registry.items())
    if n_anchors > min_count:
        raise ValueError(
            f"n_anchors {n_anchors} exceeds the smallest landmark count {min_count}")
    if n_anchors < 1:
        raise ValueError("n_anchors must be >= 1")
    rng = np.random.default_rng(seed)
    pool = [s for _, (d, samples) in registry.items() for s in samples]
    order = rng.permutation(len(pool))
    for start in range(0, len(pool), batch_size):
        batch = []
        for j in order[start:start + batch_size]:
            sample = pool[j]
            n_total = len(sample.landmarks)
            idx = np.sort(rng.choice(n_total, size=n_anchors, replace=False))
            batch.append((sample, idx))
        yield batch
