"""Encoder-decoder network mapping structure prompts to landmark coordinates.

The image side is a small from-scratch ViT: non-overlapping patches, learned
positional embeddings P, pre-norm self-attention blocks producing features F.
The decoder runs L layers of (self-attention over prompts -> cross-attention
into F -> FFN), each pre-normed with a residual connection, followed by a
two-layer MLP head with a sigmoid squashing outputs into the [0, 1]^2 crop
frame. Per-dataset semantic alignment offsets (N_D x 2) shift that dataset's
mean shape on the plane and train jointly with the network.

Decoder queries start at zero, so the first self-attention step is driven
purely by the prompts. In the prompt self-attention block every reduction
over the prompt axis accumulates in value-sorted order, which makes the
whole decoder exactly (bitwise) equivariant to prompt permutations instead
of merely up to float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import NumericsError
from .prompts import PromptCodecConfig, encode_points


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (256, 256)
    patch_size: tuple[int, int] = (16, 16)
    channels: int = 256
    num_heads: int = 8
    encoder_depth: int = 4
    decoder_depth: int = 6
    ffn_ratio: int = 4
    tau: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "patch_size", tuple(self.patch_size))
        h_i, w_i = self.image_size
        h_p, w_p = self.patch_size
        if h_i % h_p != 0 or w_i % w_p != 0:
            raise ValueError("image size must be a multiple of patch size")
        if self.channels % self.num_heads != 0:
            raise ValueError("channels must be divisible by num_heads")
        if self.channels % 4 != 0:
            raise ValueError("channels must be a multiple of 4 for the prompt codec")
        if self.decoder_depth < 1:
            raise ValueError("decoder depth must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size[0] // self.patch_size[0]) * \
               (self.image_size[1] // self.patch_size[1])

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    @property
    def codec(self) -> PromptCodecConfig:
        return PromptCodecConfig(self.channels, self.tau)


def ordered_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum along dim with value-sorted sequential accumulation.

    The result depends only on the multiset of summands, not their order,
    so reductions over the prompt axis commute exactly with permutations.
    """
    vals, _ = torch.sort(x, dim=dim)
    return vals.cumsum(dim).narrow(dim, x.shape[dim] - 1, 1)


def split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    """(B, N, C) -> (B, N, H, C/H), contiguous channel groups per head."""
    b, n, c = x.shape
    return x.view(b, n, num_heads, c // num_heads)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, n, h, d = x.shape
    return x.reshape(b, n, h * d)


def _head_proj(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Apply per-head (H, D, D) weights to (B, N, H, D) features."""
    return torch.einsum("bnhd,hde->bnhe", x, weight)


class EncoderBlock(nn.Module):
    """Standard pre-norm ViT block: self-attention then FFN, both residual."""

    def __init__(self, channels: int, num_heads: int, ffn_ratio: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm_attn = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_ratio * channels),
            nn.GELU(),
            nn.Linear(ffn_ratio * channels, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        d = c // self.num_heads
        q, k, v = self.qkv(self.norm_attn(x)).chunk(3, dim=-1)
        q = split_heads(q, self.num_heads).transpose(1, 2)
        k = split_heads(k, self.num_heads).transpose(1, 2)
        v = split_heads(v, self.num_heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2)
        x = x + self.proj(merge_heads(out))
        return x + self.ffn(self.norm_ffn(x))


class DecoderLayer(nn.Module):
    """One decoder layer: prompt self-attention, cross-attention into the
    image features, FFN. Prompts are added to keys and queries only; values
    never see them (Eqs. of the attention blocks)."""

    def __init__(self, channels: int, num_heads: int, ffn_ratio: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        shape = (num_heads, self.head_dim, self.head_dim)

        def head_weights():
            w = torch.empty(shape)
            for z in range(num_heads):
                nn.init.xavier_uniform_(w[z])
            return nn.Parameter(w)

        # residual-branch output projections start at zero: each layer is an
        # identity map at init, which keeps L1 training stable at high lr
        self.norm_msa = nn.LayerNorm(channels)
        self.w_k = head_weights()
        self.w_q = head_weights()
        self.w_v = head_weights()
        self.w_msa = nn.Parameter(torch.zeros(channels, channels))

        self.norm_mca = nn.LayerNorm(channels)
        self.w_k_x = head_weights()
        self.w_q_x = head_weights()
        self.w_v_x = head_weights()
        self.w_mca = nn.Parameter(torch.zeros(channels, channels))

        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_ratio * channels),
            nn.GELU(),
            nn.Linear(ffn_ratio * channels, channels),
        )
        nn.init.zeros_(self.ffn[2].weight)
        nn.init.zeros_(self.ffn[2].bias)

    def msa_block(self, tokens: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        """Self-attention among prompts; reductions over the prompt axis are
        order-canonical (see ordered_sum)."""
        if tokens.shape != prompts.shape:
            raise ValueError("tokens and prompts must have identical shapes")
        normed = split_heads(self.norm_msa(tokens), self.num_heads)
        emb = split_heads(prompts, self.num_heads)
        k = _head_proj(normed + emb, self.w_k)
        q = _head_proj(normed + emb, self.w_q)
        v = _head_proj(normed, self.w_v)
        scores = torch.einsum("bnhd,bmhd->bhnm", q, k) / math.sqrt(self.head_dim)
        scores = scores - scores.max(dim=-1, keepdim=True).values
        weights = torch.exp(scores)
        weights = weights / ordered_sum(weights, -1)
        mixed = ordered_sum(weights.unsqueeze(-1) * v.permute(0, 2, 1, 3).unsqueeze(2),
                            dim=3).squeeze(3)
        out = merge_heads(mixed.permute(0, 2, 1, 3)) @ self.w_msa
        return tokens + out

    def mca_block(self, tokens: torch.Tensor, prompts: torch.Tensor,
                  features: torch.Tensor, pos: torch.Tensor):
        """Cross-attention from prompts into image features. Returns the
        updated tokens and the (B, H, N, L) attention map."""
        if features.shape[1] != pos.shape[0]:
            raise ValueError("patch features and positional embeddings disagree on L")
        normed = split_heads(self.norm_mca(tokens), self.num_heads)
        emb = split_heads(prompts, self.num_heads)
        feat = split_heads(features, self.num_heads)
        ppos = split_heads(pos.unsqueeze(0), self.num_heads)
        k = _head_proj(feat + ppos, self.w_k_x)
        q = _head_proj(normed + emb, self.w_q_x)
        v = _head_proj(feat, self.w_v_x)
        scores = torch.einsum("bnhd,bmhd->bhnm", q, k) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        mixed = torch.einsum("bhnm,bmhd->bnhd", attn, v)
        out = merge_heads(mixed) @ self.w_mca
        return tokens + out, attn

    def forward(self, tokens, prompts, features, pos):
        tokens = self.msa_block(tokens, prompts)
        tokens, attn = self.mca_block(tokens, prompts, features, pos)
        tokens = tokens + self.ffn(self.norm_ffn(tokens))
        return tokens, attn


class RegressionHead(nn.Module):
    """Two-layer MLP ending in a sigmoid: features -> [0, 1]^2 crop coords.

    The final layer starts at zero so untrained predictions sit at the crop
    center (sigmoid(0) = 0.5)."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, 2)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.nn.functional.gelu(self.fc1(x))))


class LandmarkMapper(nn.Module):
    """Full prompt-to-landmark model with a per-dataset plane registry.

    Registered datasets contribute a fixed mean shape plus a learnable
    (N_D, 2) semantic offset table; zero-shot queries bypass the registry
    and feed raw plane points.
    """

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        c = config.channels
        self.patch_proj = nn.Conv2d(3, c, kernel_size=config.patch_size,
                                    stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(config.num_patches, c) * 0.02)
        self.encoder = nn.ModuleList(
            EncoderBlock(c, config.num_heads, config.ffn_ratio)
            for _ in range(config.encoder_depth))
        self.decoder = nn.ModuleList(
            DecoderLayer(c, config.num_heads, config.ffn_ratio)
            for _ in range(config.decoder_depth))
        self.head = RegressionHead(c)
        self.semantic_offsets = nn.ParameterDict()
        self.mean_shapes: dict[str, torch.Tensor] = {}
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_embed.dtype

    # ----- dataset registry -----

    def register_dataset(self, dataset_id: str, mean_shape_points) -> None:
        """Add a dataset: store its mean shape and create zero-initialized
        semantic alignment offsets of matching size."""
        pts = torch.as_tensor(np.asarray(mean_shape_points, dtype=np.float64),
                              dtype=self.dtype)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("mean shape must be an (N, 2) point array")
        if dataset_id in self.mean_shapes:
            raise ValueError(f"dataset {dataset_id!r} already registered")
        self.mean_shapes[dataset_id] = pts
        self.semantic_offsets[dataset_id] = nn.Parameter(torch.zeros_like(pts))

    def plane_points(self, dataset_id: str, indices=None) -> torch.Tensor:
        """Effective plane anchors: mean shape + learned offsets, optionally
        gathered at anchor indices (differentiable w.r.t. the offsets)."""
        if dataset_id not in self.mean_shapes:
            raise KeyError(f"unknown dataset {dataset_id!r}")
        pts = self.mean_shapes[dataset_id] + self.semantic_offsets[dataset_id]
        if indices is None:
            return pts
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= pts.shape[0]):
            raise IndexError(f"anchor index out of range for {dataset_id!r}")
        return pts[idx]

    # ----- forward pieces -----

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L, C) patch tokens (row-major) + P."""
        b, ch, h, w = images.shape
        if ch != 3 or (h, w) != self.config.image_size:
            raise ValueError(
                f"expected (B, 3, {self.config.image_size[0]}, "
                f"{self.config.image_size[1]}) images, got {tuple(images.shape)}")
        tokens = self.patch_proj(images.to(self.dtype)).flatten(2).transpose(1, 2)
        return tokens + self.pos_embed

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.patchify(images)
        for i, block in enumerate(self.encoder):
            tokens = block(tokens)
            if not torch.isfinite(tokens).all():
                raise NumericsError(f"non-finite activations in encoder layer {i}")
        return tokens

    def decode(self, prompts: torch.Tensor, features: torch.Tensor):
        """Run the decoder stack from zero-initialized queries.

        Returns (B, N, C) features and the stacked cross-attention maps
        (depth, B, heads, N, L)."""
        tokens = torch.zeros_like(prompts)
        maps = []
        for layer in self.decoder:
            tokens, attn = layer(tokens, prompts, features, self.pos_embed)
            maps.append(attn)
        return tokens, torch.stack(maps)

    def encode_prompts(self, points: torch.Tensor) -> torch.Tensor:
        return encode_points(points.to(self.dtype), self.config.codec)

    def forward(self, images: torch.Tensor, dataset_id: str | None = None,
                indices=None, points=None):
        """Predict landmarks for a batch of images.

        Either pass a registered dataset_id (plane points = mean shape +
        offsets, optionally masked by per-sample `indices`) or raw plane
        `points` (zero-shot; used verbatim, shape (N, 2) or (B, N, 2)).

        Returns ((B, N, 2) coords in [0, 1]^2, attention maps).
        """
        if (dataset_id is None) == (points is None):
            raise ValueError("pass exactly one of dataset_id or points")
        b = images.shape[0]
        if dataset_id is not None:
            if indices is not None and np.asarray(indices).ndim == 2:
                idx = np.asarray(indices)
                plane = torch.stack([self.plane_points(dataset_id, row) for row in idx])
            else:
                plane = self.plane_points(dataset_id, indices).unsqueeze(0).expand(b, -1, -1)
        else:
            plane = torch.as_tensor(np.asarray(points, dtype=np.float64),
                                    dtype=self.dtype)
            if plane.ndim == 2:
                plane = plane.unsqueeze(0).expand(b, -1, -1)
        prompts = self.encode_prompts(plane)
        features = self.encode_image(images)
        decoded, attn = self.decode(prompts, features)
        return self.head(decoded), attn


def build_model(config: ModelConfig, seed: int = 0,
                dtype: torch.dtype = torch.float64) -> LandmarkMapper:
    """Construct a model with a deterministic parameter initialization."""
    torch.manual_seed(seed)
    return LandmarkMapper(config, dtype=dtype)


def images_to_tensor(images, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """List/array of (H, W, 3) unit-interval images -> (B, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def decoder_flops(config: ModelConfig, n_anchors: int, batch: int = 1) -> int:
    """Exact matrix-multiply flop count (2 flops per multiply-add) for one
    decoder forward pass with n_anchors prompts."""
    c = config.channels
    d = config.head_dim
    l = config.num_patches
    n = n_anchors
    msa = 3 * n * c * d + n * c * c + 2 * n * n * c
    mca = 2 * l * c * d + n * c * d + n * c * c + 2 * n * l * c
    ffn = 2 * n * c * (config.ffn_ratio * c)
    return 2 * batch * config.decoder_depth * (msa + mca + ffn)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: LandmarkMapper, seed: int,
                    dataset_extras: dict | None = None) -> None:
    """Write a single-archive checkpoint: config, parameters, dataset
    registry snapshot (ids, landmark counts, mean shapes, offsets live in
    the state dict), RNG seed and a format version."""
    registry = {}
    extras = dataset_extras or {}
    for dataset_id, shape in model.mean_shapes.items():
        registry[dataset_id] = {
            "landmark_count": int(shape.shape[0]),
            "mean_shape": shape.detach().cpu().numpy(),
            "extras": extras.get(dataset_id),
        }
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "registry": registry,
        "seed": int(seed),
    }, path)


def load_checkpoint(path, dtype: torch.dtype = torch.float64):
    """Load a checkpoint written by save_checkpoint.

    Returns (model, payload) with the registry re-attached in insertion
    order and all parameters restored.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig(**payload["config"])
    model = LandmarkMapper(config, dtype=dtype)
    for dataset_id, entry in payload["registry"].items():
        model.register_dataset(dataset_id, entry["mean_shape"])
    model.load_state_dict(payload["state_dict"])
    return model, payload
