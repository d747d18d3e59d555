"""Encoders, RCAN-style decoders and VGG-style discriminators.

Everything is written for either 2D or 3D data (``NetworkSpec.ndim``); tensors
are ``(B, C, *spatial)``.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterator, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .config import ConfigError, NetworkSpec

DISCRIMINATORS = ("source", "feature", "target")


def _conv(nd: int, cin: int, cout: int, kernel: int = 3, stride: int | Sequence[int] = 1) -> nn.Module:
    cls = nn.Conv3d if nd == 3 else nn.Conv2d
    return cls(cin, cout, kernel, stride=stride, padding=kernel // 2)


def pixel_shuffle_nd(x: torch.Tensor, factors: Sequence[int]) -> torch.Tensor:
    """Channel-to-space rearrangement with a separate factor per spatial axis."""
    b, c, *spatial = x.shape
    nd = len(spatial)
    r = math.prod(factors)
    if c % r:
        raise ConfigError(f"{c} channels not divisible by upscale product {r}")
    x = x.reshape(b, c // r, *factors, *spatial)
    # (B, C, f0..fk, s0..sk) -> (B, C, s0, f0, s1, f1, ...)
    perm = [0, 1] + [p for i in range(nd) for p in (2 + nd + i, 2 + i)]
    x = x.permute(*perm)
    return x.reshape(b, c // r, *(s * f for s, f in zip(spatial, factors)))


class ConvAct(nn.Sequential):
    def __init__(self, nd, cin, cout, slope, stride=1):
        super().__init__(_conv(nd, cin, cout, stride=stride), nn.LeakyReLU(slope))


class LREncoder(nn.Module):
    """Stack of conv + LeakyReLU modules; keeps the spatial size."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        nd, c, a = spec.ndim, spec.base_channels, spec.leaky_slope
        blocks = [ConvAct(nd, 1, c, a)] + [ConvAct(nd, c, c, a) for _ in range(spec.n_encoder_blocks - 1)]
        self.body = nn.Sequential(*blocks)

    def forward(self, x):
        return self.body(x)


class HREncoder(nn.Module):
    """Same stack as `LREncoder` but the first conv strides by the scale factors."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        nd, c, a = spec.ndim, spec.base_channels, spec.leaky_slope
        blocks = [ConvAct(nd, 1, c, a, stride=spec.factors)]
        blocks += [ConvAct(nd, c, c, a) for _ in range(spec.n_encoder_blocks - 1)]
        self.body = nn.Sequential(*blocks)

    def forward(self, y):
        return self.body(y)


class ChannelAttention(nn.Module):
    def __init__(self, nd: int, channels: int, reduction: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool3d(1) if nd == 3 else nn.AdaptiveAvgPool2d(1)
        self.squeeze = _conv(nd, channels, channels // reduction, kernel=1)
        self.excite = _conv(nd, channels // reduction, channels, kernel=1)

    def gate(self, x):
        return torch.sigmoid(self.excite(F.relu(self.squeeze(self.pool(x)))))

    def forward(self, x):
        return x * self.gate(x)


class RCAB(nn.Module):
    def __init__(self, nd: int, channels: int, reduction: int, slope: float):
        super().__init__()
        self.body = nn.Sequential(
            _conv(nd, channels, channels),
            nn.LeakyReLU(slope),
            _conv(nd, channels, channels),
            ChannelAttention(nd, channels, reduction),
        )

    def forward(self, x):
        return x + self.body(x)


class RCANDecoder(nn.Module):
    """Shallow RCAN: one residual group of RCABs with a long skip, optional upsampling."""

    def __init__(self, spec: NetworkSpec, upscale: Sequence[int] | None):
        super().__init__()
        nd, c = spec.ndim, spec.base_channels
        self.upscale = tuple(upscale) if upscale is not None else None
        self.head = _conv(nd, c, c)
        self.group = nn.Sequential(
            *[RCAB(nd, c, spec.reduction, spec.leaky_slope) for _ in range(spec.n_rcab_blocks)],
            _conv(nd, c, c),
        )
        if self.upscale is not None and math.prod(self.upscale) > 1:
            self.up = _conv(nd, c, c * math.prod(self.upscale))
        else:
            self.up = None
        self.tail = _conv(nd, c, 1)

    def forward(self, f):
        h = self.head(f)
        h = h + self.group(h)
        if self.up is not None:
            h = pixel_shuffle_nd(self.up(h), self.upscale)
        return self.tail(h)


class Discriminator(nn.Module):
    """VGG-style: stride-2 conv stages with doubling width, global pool, linear logit."""

    def __init__(self, spec: NetworkSpec, in_channels: int):
        super().__init__()
        nd, c, a = spec.ndim, spec.base_channels, spec.leaky_slope
        self.in_channels = in_channels
        layers, cin = [], in_channels
        for s in range(spec.disc_stages):
            cout = c * 2**s
            layers.append(ConvAct(nd, cin, cout, a, stride=2))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def forward(self, x):
        h = self.features(x)
        return self.head(h.flatten(2).mean(-1)).squeeze(-1)


class Networks(nn.Module):
    """All generators and discriminators of one experiment."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.lr_encoder = LREncoder(spec)
        self.hr_encoder = HREncoder(spec)
        self.sr_decoder = RCANDecoder(spec, spec.factors)
        self.lr_decoder = RCANDecoder(spec, None)
        self.d_source = Discriminator(spec, 1)
        self.d_feature = Discriminator(spec, spec.base_channels)
        self.d_target = Discriminator(spec, 1)

    # generator pieces

    def _check(self, x: torch.Tensor, channels: int, what: str) -> None:
        nd = self.spec.ndim
        if x.ndim != nd + 2 or x.shape[1] != channels:
            raise ConfigError(
                f"{what}: expected (B, {channels}, {nd} spatial axes), got {tuple(x.shape)}"
            )

    def lr_encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x, 1, "lr_encode")
        return self.lr_encoder(x)

    def hr_encode(self, y: torch.Tensor) -> torch.Tensor:
        self._check(y, 1, "hr_encode")
        for ax, (n, f) in enumerate(zip(y.shape[2:], self.spec.factors)):
            if n % f:
                raise ConfigError(f"hr_encode: axis {ax} length {n} not divisible by factor {f}")
        return self.hr_encoder(y)

    def sr_decode(self, f: torch.Tensor) -> torch.Tensor:
        self._check(f, self.spec.base_channels, "sr_decode")
        return self.sr_decoder(f)

    def lr_decode(self, f: torch.Tensor) -> torch.Tensor:
        self._check(f, self.spec.base_channels, "lr_decode")
        return self.lr_decoder(f)

    def discriminate(self, d_id: str, x: torch.Tensor, lr_grid: Sequence[int] | None = None) -> torch.Tensor:
        """One logit per sample. ``lr_grid`` (spatial LR shape) enables the grid check."""
        if d_id not in DISCRIMINATORS:
            raise ConfigError(f"unknown discriminator {d_id!r}; choose from {DISCRIMINATORS}")
        d = getattr(self, f"d_{d_id}")
        self._check(x, d.in_channels, f"{d_id} discriminator")
        if lr_grid is not None:
            grid = tuple(lr_grid)
            if d_id == "source":
                grid = tuple(n * f for n, f in zip(grid, self.spec.factors))
            if tuple(x.shape[2:]) != grid:
                raise ConfigError(f"{d_id} discriminator expects grid {grid}, got {tuple(x.shape[2:])}")
        return d(x)

    def generator_modules(self) -> list[nn.Module]:
        return [self.lr_encoder, self.hr_encoder, self.sr_decoder, self.lr_decoder]

    def discriminator_modules(self) -> list[nn.Module]:
        return [self.d_source, self.d_feature, self.d_target]

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        for m in self.generator_modules():
            yield from m.parameters()

    def discriminator_parameters(self) -> Iterator[nn.Parameter]:
        for m in self.discriminator_modules():
            yield from m.parameters()

    def param_counts(self) -> dict[str, int]:
        names = ["lr_encoder", "hr_encoder", "sr_decoder", "lr_decoder", "d_source", "d_feature", "d_target"]
        return {n: sum(p.numel() for p in getattr(self, n).parameters()) for n in names}


def init_weights(module: nn.Module, slope: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


def build_networks(spec: NetworkSpec, seed: int = 0) -> Networks:
    """Construct and initialize all networks; same (spec, seed) gives identical parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        nets = Networks(spec)
        init_weights(nets, spec.leaky_slope)
    return nets


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
