"""Central finite-difference gradient checking against autograd."""

import numpy as np
import torch

from planemark.model import images_to_tensor
from planemark.training import l1_landmark_loss


def toy_loss_closure(model, samples, dataset_id="synthA", n_anchors=6, seed=0):
    """Deterministic loss over a small batch with fixed anchor indices.

    Returns (loss_fn, param dict). The loss is Eq-style L1 over the masked
    anchors, differentiable w.r.t. every parameter group including the
    semantic alignment offsets.
    """
    rng = np.random.default_rng(seed)
    images = images_to_tensor([s.image for s in samples])
    n_total = len(samples[0].landmarks)
    idx = np.stack([np.sort(rng.choice(n_total, size=n_anchors, replace=False))
                    for _ in samples])
    targets = torch.from_numpy(
        np.stack([s.landmarks.coords[i] for s, i in zip(samples, idx)]))
    valid = torch.ones(len(samples), n_anchors, dtype=torch.bool)

    def loss_fn():
        plane = torch.stack([model.plane_points(dataset_id, row) for row in idx])
        prompts = model.encode_prompts(plane)
        feats = model.encode_image(images)
        decoded, _ = model.decode(prompts, feats)
        return l1_landmark_loss(model.head(decoded), targets, valid)

    return loss_fn, dict(model.named_parameters())


def finite_difference_check(loss_fn, params, step=1e-4, max_per_group=40,
                            seed=0):
    """Compare analytic gradients to central differences per parameter group.

    For each group a subset of coordinates (all of them when the group is
    small) is perturbed by +/-step. Returns {group: relative error}, where
    the relative error is max|fd - analytic| over the sampled coordinates
    divided by max(|analytic|, 1e-6) of the group sample.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            numel = p.numel()
            n_check = min(numel, max_per_group)
            flat_idx = rng.choice(numel, size=n_check, replace=False)
            analytic = p.grad.reshape(-1)[flat_idx].clone()
            flat = p.reshape(-1)
            fd = torch.empty(n_check, dtype=p.dtype)
            for j, fi in enumerate(flat_idx):
                orig = flat[fi].item()
                flat[fi] = orig + step
                plus = loss_fn().item()
                flat[fi] = orig - step
                minus = loss_fn().item()
                flat[fi] = orig
                fd[j] = (plus - minus) / (2.0 * step)
            scale = max(analytic.abs().max().item(), 1e-6)
            errors[name] = (fd - analytic).abs().max().item() / scale
    return errors
