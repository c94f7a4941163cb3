"""Dataset evaluation, zero-shot prediction and the linear-probe protocol.

Evaluation always runs with the full unmasked prompt set (masking is a
training-time device). Metrics are computed in the source pixel frame so
box normalization and datasets with non-square crops stay meaningful; for
square whole-image crops (the synthetic world) this matches the crop frame
exactly up to scale.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import DatasetDescriptor, Sample, load_image
from .errors import NumericsError
from .geometry import fit_affine_alignment, generate_scratch_shape
from .metrics import CEDCurve, MetricReport, nme_per_sample
from .model import LandmarkMapper, images_to_tensor


def _materialize(samples: list[Sample], image_size, root=".") -> list[np.ndarray]:
    return [load_image(s, image_size, root) for s in samples]


def predict_points(model: LandmarkMapper, images, points,
                   batch_size: int = 16, collect_attention: bool = False):
    """Forward a list of images at fixed plane points, in chunks.

    Returns (B, N, 2) numpy predictions in the [0,1]^2 crop frame and, when
    requested, the stacked attention maps (depth, B, heads, N, L)."""
    model.eval()
    coords, maps = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images_to_tensor(images[start:start + batch_size], model.dtype)
            pred, attn = model(chunk, points=points)
            coords.append(pred.numpy())
            if collect_attention:
                maps.append(attn.numpy())
    preds = np.concatenate(coords)
    if collect_attention:
        return preds, np.concatenate(maps, axis=1)
    return preds, None


def zero_shot_predict(model: LandmarkMapper, plane_points, images,
                      batch_size: int = 16):
    """Predict landmarks at arbitrary plane points (no parameters touched).

    plane_points is (N, 2) in plane coordinates; any N >= 1 works. Returns
    ((B, N, 2) crop-frame coords, attention maps)."""
    pts = np.asarray(plane_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or not np.isfinite(pts).all():
        raise ValueError("plane points must be a finite (N, 2) array")
    return predict_points(model, images, pts, batch_size, collect_attention=True)


def evaluate_dataset(model: LandmarkMapper, samples: list[Sample],
                     descriptor: DatasetDescriptor, alphas=(0.1,),
                     image_root=".", plane_points=None, batch_size: int = 16):
    """Full-prompt evaluation of a sample list.

    Uses the checkpoint's registered plane anchors for descriptor.dataset_id,
    or explicit plane_points for datasets never seen in training (zero-shot).
    Returns (MetricReport, per-sample predictions in crop frame, CEDCurve).
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    if plane_points is None:
        if descriptor.dataset_id not in model.mean_shapes:
            raise KeyError(
                f"dataset {descriptor.dataset_id!r} is not registered in the "
                "checkpoint; pass explicit plane points to evaluate zero-shot")
        plane = model.plane_points(descriptor.dataset_id).detach().numpy()
    else:
        plane = np.asarray(plane_points, dtype=np.float64)
    images = _materialize(samples, model.config.image_size, image_root)
    preds, _ = predict_points(model, images, plane, batch_size)

    boxes = np.stack([s.bbox[2:] for s in samples])
    pred_px = preds * boxes[:, None, :] + np.stack([s.bbox[:2] for s in samples])[:, None, :]
    target_px = np.stack([s.pixel_landmarks() for s in samples])
    valid = np.stack([s.landmarks.valid for s in samples])
    nmes = nme_per_sample(pred_px, target_px, valid, descriptor.norm, boxes=boxes)
    report = MetricReport.compute(nmes, alphas, descriptor.norm.mode)
    return report, preds, CEDCurve.from_values(nmes)


def cross_scheme_transfer(model: LandmarkMapper, new_mean_shape,
                          correspondences, trained_dataset_id: str) -> np.ndarray:
    """Map a new scheme's mean shape onto the trained plane.

    correspondences are (new_index, trained_index) pairs; the affine fit
    aligns the new mean shape to the trained dataset's mean shape and the
    transformed points feed zero_shot_predict.
    """
    pairs = [(int(a), int(b)) for a, b in correspondences]
    if len(pairs) < 3:
        raise ValueError("need at least 3 correspondence pairs")
    if trained_dataset_id not in model.mean_shapes:
        raise KeyError(f"unknown trained dataset {trained_dataset_id!r}")
    new_pts = np.asarray(new_mean_shape, dtype=np.float64)
    trained = model.mean_shapes[trained_dataset_id].detach().numpy()
    src = np.stack([new_pts[a] for a, _ in pairs])
    dst = np.stack([trained[b] for _, b in pairs])
    transform = fit_affine_alignment(src, dst)
    return transform.apply(new_pts)


def linear_probe_eval(model: LandmarkMapper, train_samples: list[Sample],
                      test_samples: list[Sample], n_pre: int, seed: int,
                      descriptor: DatasetDescriptor, image_root=".",
                      labels_override=None) -> float:
    """Scratch-shape linear probe: predict n_pre random plane points on both
    splits, fit an affine map (bias included) from flattened predictions to
    flattened labels on the train split, apply it to the test split, and
    report inter-landmark-normalized NME in percent.

    labels_override replaces the ground-truth label arrays (train, test);
    the synthetic-oracle tests use it to feed labels that are an exact
    linear function of the predictions.
    """
    k = len(train_samples)
    if k < 2 * n_pre + 1:
        raise ValueError(
            f"train split of {k} samples cannot fit a {2 * n_pre + 1}-column probe")
    scratch = generate_scratch_shape(n_pre, (-1.0, -1.0, 1.0, 1.0), seed)
    images_train = _materialize(train_samples, model.config.image_size, image_root)
    images_test = _materialize(test_samples, model.config.image_size, image_root)
    pred_train, _ = predict_points(model, images_train, scratch)
    pred_test, _ = predict_points(model, images_test, scratch)

    if labels_override is not None:
        labels_train, labels_test = labels_override
        labels_train = np.asarray(labels_train, dtype=np.float64)
        labels_test = np.asarray(labels_test, dtype=np.float64)
    else:
        labels_train = np.stack([s.landmarks.coords for s in train_samples])
        labels_test = np.stack([s.landmarks.coords for s in test_samples])

    def design(preds):
        flat = preds.reshape(preds.shape[0], -1)
        return np.hstack([flat, np.ones((flat.shape[0], 1))])

    a_train = design(pred_train)
    solution, _, rank, _ = np.linalg.lstsq(
        a_train, labels_train.reshape(k, -1), rcond=None)
    if rank < a_train.shape[1]:
        raise NumericsError(
            f"linear probe regression is rank-deficient ({rank} < {a_train.shape[1]})")
    mapped = (design(pred_test) @ solution).reshape(labels_test.shape)

    valid = np.ones(labels_test.shape[:2], dtype=bool)
    nmes = nme_per_sample(mapped, labels_test, valid, descriptor.norm)
    return 100.0 * float(nmes.mean())


def linear_probe_protocol(model: LandmarkMapper, train_samples, test_samples,
                          n_pre: int, seeds, descriptor: DatasetDescriptor,
                          image_root="."):
    """Repeat the probe over several scratch shapes; returns (mean, std,
    per-seed NMEs in percent)."""
    values = [linear_probe_eval(model, train_samples, test_samples, n_pre,
                                s, descriptor, image_root) for s in seeds]
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std()), values


def format_probe_report(mean: float, std: float, n_pre: int) -> str:
    return f"inter-ocular NME (N_pre={n_pre}): {mean:.2f}+/-{std:.2f}%"


def export_attention(path, attention: np.ndarray) -> None:
    """Save cross-attention maps with layer/head indices as metadata arrays."""
    depth, _, heads = attention.shape[:3]
    np.savez(path, weights=attention,
             layer_indices=np.arange(depth), head_indices=np.arange(heads))
