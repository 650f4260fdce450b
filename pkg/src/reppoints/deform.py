"""Bilinear sampling at irregular points and a 3x3 deformable convolution.

Coordinates are in feature-map units: integer ``(x, y)`` lands exactly on
grid node ``f[..., y, x]``.  Samples that fall outside the map read zeros.

Offset fields carry 18 channels per location, ordered as 9 ``(dx, dy)`` pairs
for the kernel slots in row-major order (slot ``k = 3 * ky + kx``), i.e. the
same order as the point sets produced by the head.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

KERNEL_SLOTS = 9


def grid_template(dtype=torch.float32, device=None) -> torch.Tensor:
    """Regular 3x3 kernel positions relative to the center, ``(9, 2)`` as ``(x, y)``."""
    ys, xs = torch.meshgrid(torch.arange(-1, 2), torch.arange(-1, 2), indexing="ij")
    return torch.stack((xs.reshape(-1), ys.reshape(-1)), dim=-1).to(dtype=dtype, device=device)


def bilinear_sample_batch(features: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``features`` (B, C, H, W) at per-image coordinates.

    ``x`` and ``y`` have shape ``(B, *S)``; the result is ``(B, C, *S)``.
    """
    b, c, h, w = features.shape
    sample_shape = x.shape[1:]
    x = x.reshape(b, -1)
    y = y.reshape(b, -1)
    x0f = torch.floor(x)
    y0f = torch.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    flat = features.reshape(b, c, h * w)
    out = features.new_zeros(b, c, x.shape[1])
    for dy, dx, weight in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = torch.where(inside, yi * w + xi, torch.zeros_like(xi))
        vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(b, c, idx.shape[1]))
        out = out + vals * (weight * inside.to(weight.dtype)).unsqueeze(1)
    return out.reshape(b, c, *sample_shape)


def bilinear_sample(feature: torch.Tensor, x, y) -> torch.Tensor:
    """Interpolate a single ``(C, H, W)`` map at one point; returns the channel vector."""
    x = torch.as_tensor(x, dtype=feature.dtype)
    y = torch.as_tensor(y, dtype=feature.dtype)
    if not (torch.isfinite(x) and torch.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    out = bilinear_sample_batch(feature.unsqueeze(0), x.reshape(1, 1), y.reshape(1, 1))
    return out[0, :, 0]


def points_to_offset_field(relative_points: torch.Tensor) -> torch.Tensor:
    """Turn per-location point offsets about the center into a kernel offset field.

    ``relative_points`` is ``(B, 18, H, W)`` holding 9 ``(x, y)`` positions in
    feature units relative to each location; slot ``g`` of the result is that
    position minus the regular grid position of slot ``g``.
    """
    if relative_points.ndim != 4 or relative_points.shape[1] != 2 * KERNEL_SLOTS:
        raise ValueError(
            f"expected (B, {2 * KERNEL_SLOTS}, H, W) relative points, got {tuple(relative_points.shape)}; "
            "a 3x3 deformable kernel needs exactly 9 points"
        )
    grid = grid_template(relative_points.dtype, relative_points.device).reshape(1, 2 * KERNEL_SLOTS, 1, 1)
    return relative_points - grid


def deform_conv3x3(features: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                   bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 deformable convolution with stride 1 and 'same' output size.

    ``features`` (B, Cin, H, W), ``offsets`` (B, 18, H, W), ``weight``
    (Cout, Cin, 3, 3).  Slot ``k`` of the location ``(i, j)`` samples at
    ``(j + kx - 1 + dx_k, i + ky - 1 + dy_k)``.
    """
    b, cin, h, w = features.shape
    if offsets.shape != (b, 2 * KERNEL_SLOTS, h, w):
        raise ValueError(f"offset field shape {tuple(offsets.shape)} does not match features {tuple(features.shape)}")
    if weight.ndim != 4 or weight.shape[1:] != (cin, 3, 3):
        raise ValueError(f"weight must be (Cout, {cin}, 3, 3), got {tuple(weight.shape)}")
    grid = grid_template(features.dtype, features.device)
    ii, jj = torch.meshgrid(
        torch.arange(h, dtype=features.dtype, device=features.device),
        torch.arange(w, dtype=features.dtype, device=features.device),
        indexing="ij",
    )
    off = offsets.reshape(b, KERNEL_SLOTS, 2, h, w)
    sx = jj + grid[:, 0].reshape(KERNEL_SLOTS, 1, 1) + off[:, :, 0]
    sy = ii + grid[:, 1].reshape(KERNEL_SLOTS, 1, 1) + off[:, :, 1]
    cols = bilinear_sample_batch(features, sx, sy)  # (B, Cin, 9, H, W)
    out = torch.einsum("bckhw,ock->bohw", cols, weight.reshape(weight.shape[0], cin, KERNEL_SLOTS))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class DeformConv3x3(nn.Module):
    """Deformable 3x3 convolution whose offset field is supplied by the caller."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True):
        super().__init__()
        ref = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=bias)
        self.weight = ref.weight
        self.bias = ref.bias

    def forward(self, features: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return deform_conv3x3(features, offsets, self.weight, self.bias)


def standard_conv3x3(features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    return F.conv2d(features, weight, bias, padding=1)
