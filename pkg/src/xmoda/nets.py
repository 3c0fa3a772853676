"""Desk-scale network architectures (generators, patch discriminators, U-Nets)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class NetSpec:
    kind: str  # "generator" | "discriminator"
    base_width: int = 16
    n_down: int = 2
    n_resblocks: int = 2
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kind not in ("generator", "discriminator"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if min(self.base_width, self.n_down, self.in_channels, self.out_channels) < 1 or self.n_resblocks < 0:
            raise ValueError(f"invalid network spec {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(net: nn.Module, gain: float = 0.02):
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Residual encoder-decoder with a tanh head.

    ``blocks`` is an ordered list so encoder activations can be tapped by
    index for the contrastive loss: index 0 is the stem, ``1..n_down`` the
    downsampling stages, then residual blocks, upsampling stages, head.
    """

    def __init__(self, spec: NetSpec):
        super().__init__()
        w = spec.base_width
        blocks = [nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True))]
        ch = w
        for _ in range(spec.n_down):
            blocks.append(nn.Sequential(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)))
            ch *= 2
        for _ in range(spec.n_resblocks):
            blocks.append(ResBlock(ch))
        for _ in range(spec.n_down):
            blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1), nn.InstanceNorm2d(ch // 2), nn.ReLU(True),
            ))
            ch //= 2
        blocks.append(nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, spec.out_channels, 7), nn.Tanh()))
        self.blocks = nn.ModuleList(blocks)
        self.spec = spec
        init_weights(self)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x

    def encode(self, x, layers) -> list[torch.Tensor]:
        """Activations after each block index in ``layers``."""
        feats = []
        last = max(layers)
        for i, b in enumerate(self.blocks):
            x = b(x)
            if i in layers:
                feats.append(x)
            if i == last:
                break
        return feats

    def layer_channels(self, layers) -> list[int]:
        w = self.spec.base_width
        return [w * 2 ** min(i, self.spec.n_down) for i in layers]


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``n_down`` stride-2 convolutions, one stride-1 stage, linear output map.

    With ``n_down=3`` each output sees a 70x70 input patch.
    """

    def __init__(self, spec: NetSpec):
        super().__init__()
        w = spec.base_width
        layers = [nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        ch = w
        for i in range(1, spec.n_down + 1):
            stride = 2 if i < spec.n_down else 1
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=stride, padding=1), nn.InstanceNorm2d(ch * 2),
                       nn.LeakyReLU(0.2, True)]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 4, padding=1))
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return self.net(x)


class ProjectionHead(nn.Module):
    """Two-layer MLP applied to attended features before normalisation."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_ch, out_ch), nn.ReLU(True), nn.Linear(out_ch, out_ch))
        init_weights(self)

    def forward(self, x):
        return self.net(x)


def _conv(dims):
    return nn.Conv2d if dims == 2 else nn.Conv3d


def _norm(dims):
    return nn.InstanceNorm2d if dims == 2 else nn.InstanceNorm3d


class _DoubleConv(nn.Sequential):
    def __init__(self, dims, cin, cout):
        conv, norm = _conv(dims), _norm(dims)
        super().__init__(
            conv(cin, cout, 3, padding=1), norm(cout, affine=True), nn.LeakyReLU(0.01, True),
            conv(cout, cout, 3, padding=1), norm(cout, affine=True), nn.LeakyReLU(0.01, True),
        )


class UNet(nn.Module):
    def __init__(self, dims: int, in_channels: int = 1, n_classes: int = 3, base_width: int = 8, depth: int = 2):
        super().__init__()
        if dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        pool = nn.MaxPool2d if dims == 2 else nn.MaxPool3d
        up = nn.ConvTranspose2d if dims == 2 else nn.ConvTranspose3d
        widths = [base_width * 2**i for i in range(depth + 1)]
        self.enc = nn.ModuleList([_DoubleConv(dims, in_channels, widths[0])])
        self.enc.extend(_DoubleConv(dims, widths[i], widths[i + 1]) for i in range(depth))
        self.pool = pool(2)
        self.up = nn.ModuleList(up(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth)))
        self.dec = nn.ModuleList(_DoubleConv(dims, widths[i] * 2, widths[i]) for i in reversed(range(depth)))
        self.head = _conv(dims)(widths[0], n_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)
