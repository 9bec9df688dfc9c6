"""U-Net that maps one projection to per-cell depth + position offsets.

The head is a 1x1 convolution with four output channels followed by
average pooling with the downsampling factor, so a (B, 1, H, W) input
becomes a (B, 4, H/a, W/a) raw grid.  Raw values are squashed into
physical ranges by :func:`activate`: channel 0 -> depth inside the
source-to-volume span via a scaled sigmoid, channels 1..3 -> world
offsets in [-offset_max, offset_max] via tanh.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .geometry import Geometry

OFFSET_MAX_VOXELS = 4.0


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class CenterNet(nn.Module):
    """Encoder-decoder with skip connections and the pooled 4-channel head."""

    def __init__(self, channels=(16, 32, 64), alpha_ds: int = 4):
        super().__init__()
        if alpha_ds < 1:
            raise ValueError("alpha_ds must be >= 1")
        self.alpha_ds = int(alpha_ds)
        self.channels = tuple(int(c) for c in channels)

        self.encoders = nn.ModuleList()
        cin = 1
        for c in self.channels:
            self.encoders.append(_block(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _block(self.channels[-1], 2 * self.channels[-1])

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = 2 * self.channels[-1]
        for c in reversed(self.channels):
            self.ups.append(nn.ConvTranspose2d(cin, c, 2, stride=2))
            self.decoders.append(_block(2 * c, c))
            cin = c
        self.head = nn.Conv2d(self.channels[0], 4, 1)
        self.cell_pool = nn.AvgPool2d(self.alpha_ds)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError("expected input of shape (B, 1, H, W)")
        down = max(self.alpha_ds, 2 ** len(self.channels))
        if x.shape[2] % down or x.shape[3] % down:
            raise ValueError(f"input size must be divisible by {down}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.cell_pool(self.head(x))


def activate(raw: torch.Tensor, geom: Geometry):
    """Raw (B, 4, Hc, Wc) grid -> (depth (B, Hc, Wc), offset (B, 3, Hc, Wc))."""
    d_min, d_max = geom.depth_range()
    depth = d_min + torch.sigmoid(raw[:, 0]) * (d_max - d_min)
    offset = torch.tanh(raw[:, 1:4]) * (OFFSET_MAX_VOXELS * geom.voxel_size)
    return depth, offset
