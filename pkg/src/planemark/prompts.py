"""Sinusoidal structure-prompt codec.

A plane point (x, y) becomes a C-dimensional vector: each axis gets C/2
dimensions filled with sin/cos pairs at geometrically spaced wavelengths,
and the two halves are concatenated (x first). Shifting a coordinate by a
fixed delta acts on each (sin, cos) pair as a 2x2 rotation, so the plane
geometry survives the lift into C dimensions.

The codec is fixed (non-learnable) and differentiable; everything accepts
torch tensors and keeps their dtype/device.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class PromptCodecConfig:
    channels: int = 64
    tau: float = 10000.0

    def __post_init__(self):
        if self.channels % 4 != 0 or self.channels < 4:
            raise ValueError("channels must be a positive multiple of 4")
        if self.tau <= 1.0:
            raise ValueError("tau must be greater than 1")

    @property
    def pairs_per_axis(self) -> int:
        return self.channels // 4

    def wavelengths(self, dtype=torch.float64, device=None) -> torch.Tensor:
        """Divisors tau^(2c / (C/2)) for pair index c in [0, C/4)."""
        c = torch.arange(self.pairs_per_axis, dtype=dtype, device=device)
        return self.tau ** (2.0 * c / (0.5 * self.channels))


def encode_axis(v, config: PromptCodecConfig) -> torch.Tensor:
    """Encode one coordinate axis into C/2 dimensions.

    Entry 2c is sin(v / tau^(2c/(C/2))), entry 2c+1 the matching cos.
    Accepts a scalar or any tensor shape (...,); returns (..., C/2).
    """
    val = torch.as_tensor(v)
    if not val.is_floating_point():
        val = val.to(torch.float64)
    phase = val.unsqueeze(-1) / config.wavelengths(val.dtype, val.device)
    out = torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1)
    return out.reshape(*val.shape, config.channels // 2)


def encode_points(points, config: PromptCodecConfig) -> torch.Tensor:
    """Encode (..., 2) plane points into (..., C) structure prompts.

    Concatenation order is [x-half; y-half]. Points are encoded
    independently; there is no cross-point coupling.
    """
    pts = torch.as_tensor(points)
    if not pts.is_floating_point():
        pts = pts.to(torch.float64)
    if pts.shape[-1] != 2:
        raise ValueError(f"expected (..., 2) points, got shape {tuple(pts.shape)}")
    return torch.cat([encode_axis(pts[..., 0], config),
                      encode_axis(pts[..., 1], config)], dim=-1)


def encode_point(point, config: PromptCodecConfig) -> torch.Tensor:
    """Encode a single (x, y) point into a C-vector."""
    return encode_points(torch.as_tensor(point, dtype=torch.float64), config)


def shift_rotation_matrix(delta: float, c: int,
                          config: PromptCodecConfig) -> torch.Tensor:
    """2x2 matrix carrying the (sin, cos) pair at frequency c from an
    encoding of v to the encoding of v + delta.

    Returns [[cos t, sin t], [-sin t, cos t]] with
    t = delta / tau^(2c/(C/2)).
    """
    if not 0 <= c < config.pairs_per_axis:
        raise ValueError(f"frequency index {c} out of range [0, {config.pairs_per_axis})")
    theta = torch.as_tensor(delta, dtype=torch.float64)
    theta = theta / config.wavelengths(theta.dtype)[c]
    cos_t, sin_t = torch.cos(theta), torch.sin(theta)
    return torch.stack([torch.stack([cos_t, sin_t]),
                        torch.stack([-sin_t, cos_t])])
