"""Encoder-decoder feature pyramid with skip connections.

A small five-stage convolutional encoder produces maps at strides
{8, 16, 32, 64, 128}; the decoder normalizes every map to a common width
with 1x1 conv-BN-ReLU blocks, fuses top-down bilinear upsampling with the
skip path by addition, derives a sixth coarser level by strided
convolution, and enhances every level with a 3x3 block.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .anchors import downsampled_grid


@dataclass(frozen=True)
class BackboneConfig:
    encoder_kind: str = "tiny"
    input_size: int = 384
    encoder_channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    decoder_channels: int = 256

    def __post_init__(self):
        if self.encoder_kind != "tiny":
            raise ValueError(f"unsupported encoder kind {self.encoder_kind!r}; "
                             "only the from-scratch 'tiny' encoder ships here")
        if len(self.encoder_channels) != 5:
            raise ValueError("encoder needs exactly 5 stage widths")
        if self.input_size % 8 != 0:
            raise ValueError("input size must be divisible by 8")


class CBR(nn.Module):
    """Convolution -> BatchNorm -> ReLU with same-padding. Kernel 1 or 3 only."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride=stride,
                              padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def expected_pyramid_sizes(input_size: int) -> list[int]:
    """Spatial sides of the six decoder levels for a given input side."""
    sizes = [max(input_size // s, 1) for s in (8, 16, 32, 64, 128)]
    sizes.append(downsampled_grid(sizes[-1])[0])
    return sizes


class TinyEncoder(nn.Module):
    """Five-stage encoder with stride layout {8, 16, 32, 64, 128}."""

    def __init__(self, channels: tuple[int, ...] = (32, 64, 128, 128, 128)):
        super().__init__()
        c1, c2, c3, c4, c5 = channels
        self.stage1 = nn.Sequential(CBR(3, c1, 3, stride=2),
                                    CBR(c1, c1, 3, stride=2),
                                    CBR(c1, c1, 3, stride=2))
        self.stage2 = nn.Sequential(CBR(c1, c2, 3, stride=2), CBR(c2, c2, 3))
        self.stage3 = nn.Sequential(CBR(c2, c3, 3, stride=2), CBR(c3, c3, 3))
        self.stage4 = nn.Sequential(CBR(c3, c4, 3, stride=2), CBR(c4, c4, 3))
        self.stage5 = nn.Sequential(CBR(c4, c5, 3, stride=2), CBR(c5, c5, 3))
        self.channels = tuple(channels)

    def forward(self, x) -> list[torch.Tensor]:
        maps = []
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4,
                      self.stage5):
            x = stage(x)
            maps.append(x)
        return maps


class PyramidDecoder(nn.Module):
    """Top-down fusion producing six equal-width feature maps."""

    def __init__(self, encoder_channels: tuple[int, ...], out_channels: int = 256):
        super().__init__()
        self.out_channels = out_channels
        for k, c in enumerate(encoder_channels, start=1):
            setattr(self, f"lateral{k}", CBR(c, out_channels, 1))
        for k in range(1, 5):
            setattr(self, f"topdown{k}", CBR(out_channels, out_channels, 1))
        self.downsample6 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        for k in range(1, 7):
            setattr(self, f"enhance{k}", CBR(out_channels, out_channels, 3))

    def forward(self, encoder_maps: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(encoder_maps) != 5:
            raise ValueError("expected 5 encoder maps")
        sizes = [m.shape[-1] for m in encoder_maps]
        for k in range(4):
            if sizes[k + 1] != (sizes[k] + 1) // 2:
                raise ValueError(f"stride mismatch between levels {k + 1} and "
                                 f"{k + 2}: sizes {sizes[k]} vs {sizes[k + 1]}")
        decoded = [None] * 5
        decoded[4] = self.lateral5(encoder_maps[4])
        for k in range(3, -1, -1):
            up = F.interpolate(decoded[k + 1], size=encoder_maps[k].shape[-2:],
                               mode="bilinear", align_corners=False)
            lateral = getattr(self, f"lateral{k + 1}")
            topdown = getattr(self, f"topdown{k + 1}")
            decoded[k] = lateral(encoder_maps[k]) + topdown(up)
        stride = downsampled_grid(sizes[4])[1]
        d6 = F.conv2d(decoded[4], self.downsample6.weight, self.downsample6.bias,
                      stride=stride, padding=1)
        decoded.append(d6)
        return [getattr(self, f"enhance{k + 1}")(d) for k, d in enumerate(decoded)]


class Backbone(nn.Module):
    """Full image-to-pyramid network: returns the six decoder maps."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.encoder = TinyEncoder(self.config.encoder_channels)
        self.decoder = PyramidDecoder(self.config.encoder_channels,
                                      self.config.decoder_channels)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.decoder(self.encoder(images))
