"""Anchor masking, the L1 mapping loss, the training loop and few-shot
transfer.

Each iteration keeps a random anchor subset of every sample's mean shape;
prompts are built from those plane anchors (mean shape + semantic offsets)
and the loss compares the mapped anchors against the same indices of the
sample's labeled landmarks. Invalid (self-occluded) anchors may be sampled
but contribute nothing: they are excluded from both numerator and
denominator of the loss.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationConfig, augment
from .data import DatasetRegistry, Sample, make_batches
from .errors import NumericsError
from .geometry import AffineTransform, compute_mean_shape
from .model import LandmarkMapper, save_checkpoint
from .synthetic import scheme_descriptor  # noqa: F401  (re-export convenience)


@dataclass(frozen=True)
class MaskPlan:
    """Sorted anchor indices for one sample."""

    indices: np.ndarray
    dataset_id: str

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size < 1:
            raise ValueError("a mask plan needs at least one anchor")
        if len(np.unique(idx)) != idx.size:
            raise ValueError("anchor indices must be unique")
        object.__setattr__(self, "indices", np.sort(idx))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    milestones: tuple[int, ...] = (80, 90)
    decay: float = 0.1
    weight_decay: float = 1e-4
    mask_ratio: float = 0.75
    n_anchors: int | None = None
    batch_size: int = 16
    seed: int = 0
    checkpoint_interval: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ValueError("milestones must lie before the final epoch")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("milestones", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def anchors_from_ratio(num_landmarks: int, ratio: float) -> int:
    """Anchors kept after masking `ratio` of a shape (round half to even,
    matching the 24-of-98 convention at ratio 0.75)."""
    n = int(round((1.0 - ratio) * num_landmarks))
    return max(n, 1)


def mask_anchors(descriptor, rng: np.random.Generator,
                 ratio: float | None = None,
                 n_anchors: int | None = None) -> MaskPlan:
    """Uniform anchor subset without replacement for one sample."""
    if (ratio is None) == (n_anchors is None):
        raise ValueError("pass exactly one of ratio or n_anchors")
    n_total = descriptor.num_landmarks
    n = n_anchors if n_anchors is not None else anchors_from_ratio(n_total, ratio)
    if not 1 <= n <= n_total:
        raise ValueError(f"anchor count {n} out of range [1, {n_total}]")
    idx = rng.choice(n_total, size=n, replace=False)
    return MaskPlan(idx, descriptor.dataset_id)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant step schedule."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    steps = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.decay ** steps


def l1_landmark_loss(predicted: torch.Tensor, target: torch.Tensor,
                     valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid (sample, anchor) slots of |dx| + |dy|."""
    if predicted.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    per_anchor = (predicted - target).abs().sum(dim=-1)
    mask = valid.to(per_anchor.dtype)
    count = mask.sum()
    if count.item() == 0:
        raise ValueError("no valid anchors in the batch")
    return (per_anchor * mask).sum() / count


def _batch_tensors(model: LandmarkMapper, batch, augment_cfg=None,
                   rng=None, registry: DatasetRegistry | None = None):
    """Stack a batch into tensors. Returns (images, ids, indices (B, Na),
    targets (B, Na, 2), valid (B, Na))."""
    images, ids, idx_rows, targets, valids = [], [], [], [], []
    for sample, indices in batch:
        if augment_cfg is not None:
            perm = None
            if registry is not None and sample.dataset_id in registry:
                perm = registry.descriptor(sample.dataset_id).flip_permutation
            sample = augment(sample, augment_cfg, rng, flip_permutation=perm)
        if sample.image is None:
            raise ValueError(f"sample {sample.source!r} has no materialized image")
        images.append(sample.image)
        ids.append(sample.dataset_id)
        idx_rows.append(np.asarray(indices, dtype=np.int64))
        targets.append(sample.landmarks.coords[indices])
        valids.append(sample.landmarks.valid[indices])
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    images_t = torch.from_numpy(arr).permute(0, 3, 1, 2).to(model.dtype)
    targets_t = torch.from_numpy(np.stack(targets)).to(model.dtype)
    valid_t = torch.from_numpy(np.stack(valids))
    return images_t, ids, np.stack(idx_rows), targets_t, valid_t


def batch_forward(model: LandmarkMapper, images: torch.Tensor, ids,
                  indices: np.ndarray) -> torch.Tensor:
    """Forward a mixed-dataset batch: one encoder pass, then decoder groups
    per dataset (prompt counts are equal, plane registries differ)."""
    features = model.encode_image(images)
    n_a = indices.shape[1]
    preds = torch.empty(images.shape[0], n_a, 2, dtype=model.dtype)
    for dataset_id in dict.fromkeys(ids):
        rows = [i for i, d in enumerate(ids) if d == dataset_id]
        plane = torch.stack([model.plane_points(dataset_id, indices[i]) for i in rows])
        prompts = model.encode_prompts(plane)
        decoded, _ = model.decode(prompts, features[rows])
        preds[rows] = model.head(decoded)
    return preds


def train_step(model: LandmarkMapper, batch, optimizer,
               augment_cfg=None, rng=None,
               registry: DatasetRegistry | None = None,
               grad_clip: float = 0.0) -> float:
    """One gradient step on a batch of (sample, anchor_indices) pairs."""
    images, ids, indices, targets, valid = _batch_tensors(
        model, batch, augment_cfg, rng, registry)
    optimizer.zero_grad(set_to_none=True)
    preds = batch_forward(model, images, ids, indices)
    loss = l1_landmark_loss(preds, targets, valid)
    if not torch.isfinite(loss):
        sources = [s.source for s, _ in batch]
        raise NumericsError(f"non-finite loss on batch {sources}")
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.detach())


def register_datasets(model: LandmarkMapper, registry: DatasetRegistry) -> None:
    """Compute mean shapes from the registry's samples (landmarks are
    already crop-canonical, so the canonicalizers are identities) and add
    any missing datasets to the model."""
    for dataset_id, (descriptor, samples) in registry.items():
        if dataset_id in model.mean_shapes:
            continue
        shape = compute_mean_shape(
            [s.landmarks for s in samples],
            [AffineTransform.identity() for _ in samples],
            dataset_id=dataset_id,
        )
        model.register_dataset(dataset_id, shape.points)
        if descriptor.mean_shape is None:
            registry.set_descriptor(descriptor.with_mean_shape(shape))


def _epoch_seed(seed: int, epoch: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, salt]).generate_state(1)[0])


def resolve_n_anchors(config: TrainConfig, registry: DatasetRegistry) -> int:
    """Global anchor count: explicit n_anchors wins; otherwise the mask
    ratio applied to the smallest registered landmark count."""
    if config.n_anchors is not None:
        return config.n_anchors
    min_count = min(d.num_landmarks for _, (d, _) in registry.items())
    return anchors_from_ratio(min_count, config.mask_ratio)


def train(model: LandmarkMapper, registry: DatasetRegistry, config: TrainConfig,
          out_dir=None, augment_cfg: AugmentationConfig | None = None,
          dataset_extras: dict | None = None) -> list[dict]:
    """Full training loop. Returns one history record per epoch:
    {"epoch", "lr", "mean_loss", "wall_time"}. When out_dir is given the
    records stream to metrics.jsonl and checkpoints land there too."""
    register_datasets(model, registry)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  betas=config.betas,
                                  weight_decay=config.weight_decay)
    n_anchors = resolve_n_anchors(config, registry)
    history = []
    log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w")
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = np.random.default_rng(_epoch_seed(config.seed, epoch, salt=1))
            start = time.perf_counter()
            losses = []
            for batch in make_batches(registry, config.batch_size, n_anchors,
                                      seed=_epoch_seed(config.seed, epoch)):
                losses.append(train_step(model, batch, optimizer,
                                         augment_cfg, rng, registry,
                                         grad_clip=config.grad_clip))
            record = {
                "epoch": epoch,
                "lr": lr,
                "mean_loss": float(np.mean(losses)),
                "wall_time": time.perf_counter() - start,
            }
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if (out_dir is not None and config.checkpoint_interval
                    and (epoch + 1) % config.checkpoint_interval == 0):
                save_checkpoint(Path(out_dir) / f"checkpoint_{epoch + 1:04d}.pt",
                                model, config.seed, dataset_extras)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoint_final.pt", model,
                            config.seed, dataset_extras)
    finally:
        if log_fh is not None:
            log_fh.close()
    return history


def fewshot_finetune(model: LandmarkMapper, descriptor, shots: list[Sample],
                     config: TrainConfig, out_dir=None,
                     augment_cfg: AugmentationConfig | None = None) -> list[dict]:
    """Transfer a pretrained model to a new landmark scheme from K samples.

    A mean shape is computed from the shots, fresh zero-initialized semantic
    offsets are registered, and the whole model is fine-tuned end to end
    with no architecture change. K = 1 is fine (the mean shape is that
    sample's shape)."""
    if not shots:
        raise ValueError("few-shot transfer needs at least one sample")
    registry = DatasetRegistry()
    registry.add(descriptor, shots)
    return train(model, registry, config, out_dir=out_dir, augment_cfg=augment_cfg)
