"""Alignment-aware deformable 3x3 sampling and its offset sources.

The deformable convolution samples the feature map at per-location,
per-kernel-point displaced positions with bilinear interpolation (zero
outside bounds). Offsets are stored as (dy, dx) pairs per kernel point,
kernel points in row-major order, and are shared by all anchors at a
location. Five strategies produce them: zero offsets, an implicit 3x3 conv
on the sampled feature itself, explicit convs on the location-change or
shape-change channels of the adjustment branch (or their concatenation),
and the disentangled form where a shared 2-vector shift learned from the
location channels is broadcast-added to per-kernel-point residuals learned
from the shape channels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import nn

KERNEL_POINTS = 9


class OffsetMode(enum.Enum):
    NONE = "none"
    IMPLICIT = "implicit"
    EXPLICIT_LOC = "explicit_loc"
    EXPLICIT_SHAPE = "explicit_shape"
    EXPLICIT_CONCAT = "explicit_concat"
    DISENTANGLED = "disentangled"


@dataclass
class OffsetField:
    """Offsets of one level: shared shift, per-kernel-point residuals.

    ``shift`` has 2 channels ((dy, dx), zero for non-disentangled modes),
    ``residuals`` 2K channels. The composed field is shift broadcast-added
    to every kernel point's residual pair.
    """

    shift: torch.Tensor
    residuals: torch.Tensor
    kernel_points: int = KERNEL_POINTS

    def __post_init__(self):
        if self.shift.shape[1] != 2:
            raise ValueError("shift must have 2 channels")
        if self.residuals.shape[1] != 2 * self.kernel_points:
            raise ValueError("residuals must have 2K channels")

    def composed(self) -> torch.Tensor:
        """Final (B, 2K, H, W) offsets: shift + residual at every kernel point."""
        b, _, h, w = self.residuals.shape
        res = self.residuals.view(b, self.kernel_points, 2, h, w)
        return (res + self.shift[:, None]).view(b, 2 * self.kernel_points, h, w)


def split_adjustment(delta_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a 4A-channel adjustment map into location (dx, dy) and shape
    (dw, dh) channel groups of 2A channels each.

    The map is anchor-major: channels (4a, 4a+1, 4a+2, 4a+3) hold anchor a's
    (dx, dy, dw, dh).
    """
    channels = delta_map.shape[1]
    if channels % 4 != 0:
        raise ValueError(f"adjustment map channels {channels} not divisible by 4")
    a = channels // 4
    idx = torch.arange(a, device=delta_map.device) * 4
    loc = torch.stack([delta_map[:, idx], delta_map[:, idx + 1]], dim=2)
    shape = torch.stack([delta_map[:, idx + 2], delta_map[:, idx + 3]], dim=2)
    b, _, _, h, w = loc.shape
    return loc.reshape(b, 2 * a, h, w), shape.reshape(b, 2 * a, h, w)


def interleave_adjustment(loc: torch.Tensor, shape: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`split_adjustment`."""
    b, two_a, h, w = loc.shape
    a = two_a // 2
    merged = torch.cat([loc.view(b, a, 2, h, w), shape.view(b, a, 2, h, w)], dim=2)
    return merged.reshape(b, 4 * a, h, w)


class OffsetNet(nn.Module):
    """Offset-producing convolutions of one detection level.

    All convs are 3x3 and zero-initialized so training starts from regular
    convolution sampling.
    """

    def __init__(self, mode: OffsetMode, feature_channels: int,
                 anchors_per_location: int):
        super().__init__()
        self.mode = mode
        a2 = 2 * anchors_per_location

        def zero_conv(cin, cout):
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            return conv

        if mode is OffsetMode.IMPLICIT:
            self.offset = zero_conv(feature_channels, 2 * KERNEL_POINTS)
        elif mode is OffsetMode.EXPLICIT_LOC:
            self.offset = zero_conv(a2, 2 * KERNEL_POINTS)
        elif mode is OffsetMode.EXPLICIT_SHAPE:
            self.offset = zero_conv(a2, 2 * KERNEL_POINTS)
        elif mode is OffsetMode.EXPLICIT_CONCAT:
            self.offset = zero_conv(2 * a2, 2 * KERNEL_POINTS)
        elif mode is OffsetMode.DISENTANGLED:
            self.loc = zero_conv(a2, 2)
            self.shape = zero_conv(a2, 2 * KERNEL_POINTS)

    def forward(self, backbone_feat: torch.Tensor,
                x_loc: torch.Tensor | None,
                x_shape: torch.Tensor | None) -> OffsetField:
        return compute_offsets(self.mode, backbone_feat, x_loc, x_shape, net=self)


def compute_offsets(mode: OffsetMode, backbone_feat: torch.Tensor,
                    x_loc: torch.Tensor | None, x_shape: torch.Tensor | None,
                    net: OffsetNet | None = None) -> OffsetField:
    """Produce the offset field of one level under the chosen strategy."""
    b, _, h, w = backbone_feat.shape
    like = dict(dtype=backbone_feat.dtype, device=backbone_feat.device)
    zero_shift = torch.zeros(b, 2, h, w, **like)
    if mode is OffsetMode.NONE:
        return OffsetField(zero_shift, torch.zeros(b, 2 * KERNEL_POINTS, h, w, **like))
    if net is None or net.mode is not mode:
        raise ValueError(f"mode {mode} requires its OffsetNet")
    if mode is OffsetMode.IMPLICIT:
        return OffsetField(zero_shift, net.offset(backbone_feat))
    if x_loc is None or x_shape is None:
        raise ValueError(f"mode {mode} needs the adjustment-branch channels")
    if mode is OffsetMode.EXPLICIT_LOC:
        return OffsetField(zero_shift, net.offset(x_loc))
    if mode is OffsetMode.EXPLICIT_SHAPE:
        return OffsetField(zero_shift, net.offset(x_shape))
    if mode is OffsetMode.EXPLICIT_CONCAT:
        return OffsetField(zero_shift, net.offset(torch.cat([x_loc, x_shape], dim=1)))
    return OffsetField(net.loc(x_loc), net.shape(x_shape))


_CANON_DY = tuple(k // 3 - 1 for k in range(KERNEL_POINTS))
_CANON_DX = tuple(k % 3 - 1 for k in range(KERNEL_POINTS))


def deform_sample(feat: torch.Tensor, offsets: torch.Tensor,
                  weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 deformable convolution with bilinear sampling and zero padding.

    ``feat`` is (B, C, H, W); ``offsets`` (B, 2K, H, W) holds a (dy, dx)
    pair for each of the K=9 row-major kernel points; ``weight`` is
    (C_out, C, 3, 3) and ``bias`` (C_out,). For output location p and
    kernel point k with canonical displacement r_k in {-1, 0, 1}^2 the
    input is sampled at p + r_k + offset_k(p); samples falling outside the
    map contribute zero. Differentiable in ``feat``, ``weight``, ``bias``
    and ``offsets``.
    """
    b, c, h, w = feat.shape
    k = KERNEL_POINTS
    if offsets.shape != (b, 2 * k, h, w):
        raise ValueError(f"offsets shape {tuple(offsets.shape)} does not match "
                         f"({b}, {2 * k}, {h}, {w})")
    if not torch.isfinite(offsets).all():
        raise ValueError("non-finite offsets")
    if weight.shape[1:] != (c, 3, 3):
        raise ValueError("weight must be (C_out, C, 3, 3)")

    like = dict(dtype=feat.dtype, device=feat.device)
    off = offsets.view(b, k, 2, h, w)
    grid_y = torch.arange(h, **like).view(1, 1, h, 1)
    grid_x = torch.arange(w, **like).view(1, 1, 1, w)
    canon_dy = torch.tensor(_CANON_DY, **like).view(1, k, 1, 1)
    canon_dx = torch.tensor(_CANON_DX, **like).view(1, k, 1, 1)
    pos_y = grid_y + canon_dy + off[:, :, 0]    # (B, K, H, W)
    pos_x = grid_x + canon_dx + off[:, :, 1]

    y0 = torch.floor(pos_y).detach()
    x0 = torch.floor(pos_x).detach()
    wy1 = pos_y - y0
    wx1 = pos_x - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1

    flat = feat.reshape(b, c, h * w)

    def corner(yc, xc, wgt):
        valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)).to(feat.dtype)
        lin = (yc.clamp(0, h - 1) * w + xc.clamp(0, w - 1)).long()
        gathered = flat.gather(2, lin.reshape(b, 1, -1).expand(b, c, -1))
        return gathered.view(b, c, k, h, w) * (valid * wgt).unsqueeze(1)

    sampled = (corner(y0, x0, wy0 * wx0)
               + corner(y0, x0 + 1, wy0 * wx1)
               + corner(y0 + 1, x0, wy1 * wx0)
               + corner(y0 + 1, x0 + 1, wy1 * wx1))

    out = torch.einsum("bckhw,ock->bohw", sampled,
                       weight.reshape(weight.shape[0], c, k))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out
