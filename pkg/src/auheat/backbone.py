"""Lightweight single-hourglass network shared by FAN and AU-Net."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

# RGB in [0, 1] is standardised with these before entering the stem.
NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.25, 0.25, 0.25)


class ConfigError(ValueError):
    """Inconsistent architecture or transfer configuration."""


@dataclass
class NetworkSpec:
    n_out: int = 68
    stem_channels: int = 64
    channels: int = 128
    depth: int = 4
    kernel: int = 3

    def validate(self) -> None:
        if self.n_out < 1:
            raise ConfigError(f"n_out must be >= 1, got {self.n_out}")
        if self.depth < 1:
            raise ConfigError(f"hourglass depth must be >= 1, got {self.depth}")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        for name in ("stem_channels", "channels"):
            c = getattr(self, name)
            if c < 4 or c % 4:
                raise ConfigError(f"{name} must be a positive multiple of 4, got {c}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelBundle:
    """A network plus everything needed to rebuild and interpret it.

    ``arch`` is a plain-dict description that :func:`auheat.checkpoint.rebuild`
    turns back into a module; ``meta`` carries run bookkeeping such as the
    transfer learning-rate scale or frozen-tensor checksums.
    """

    net: nn.Module
    mode: str
    arch: dict
    meta: dict = field(default_factory=dict)

    @property
    def n_out(self) -> int:
        return self.arch["n_out"]


class ConvBlock(nn.Module):
    """Hierarchical multi-scale residual block.

    Three pre-activated k x k convolutions yield C_o/2, C_o/4 and C_o/4
    channels; their outputs are concatenated and added to the (projected when
    C_i != C_o) input.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__()
        if out_channels % 4:
            raise ConfigError(f"ConvBlock out_channels must divide by 4, got {out_channels}")
        half, quarter = out_channels // 2, out_channels // 4
        pad = kernel // 2
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, half, kernel, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm2d(half)
        self.conv2 = nn.Conv2d(half, quarter, kernel, padding=pad, bias=False)
        self.bn3 = nn.BatchNorm2d(quarter)
        self.conv3 = nn.Conv2d(quarter, quarter, kernel, padding=pad, bias=False)
        if in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.BatchNorm2d(in_channels),
                nn.ReLU(inplace=True),
                nn.Conv2d(in_channels, out_channels, 1, bias=False),
            )
        else:
            self.downsample = None

    def forward(self, x):
        out1 = self.conv1(F.relu(self.bn1(x)))
        out2 = self.conv2(F.relu(self.bn2(out1)))
        out3 = self.conv3(F.relu(self.bn3(out2)))
        out = torch.cat((out1, out2, out3), dim=1)
        residual = x if self.downsample is None else self.downsample(x)
        return out + residual


class Hourglass(nn.Module):
    """Recursive encoder-decoder; max-pool down, bilinear up, additive skips."""

    def __init__(self, depth: int, channels: int, kernel: int = 3):
        super().__init__()
        self.depth = depth
        self.up1 = ConvBlock(channels, channels, kernel)
        self.low1 = ConvBlock(channels, channels, kernel)
        if depth > 1:
            self.low2 = Hourglass(depth - 1, channels, kernel)
        else:
            self.low2 = ConvBlock(channels, channels, kernel)
        self.low3 = ConvBlock(channels, channels, kernel)

    def forward(self, x):
        up1 = self.up1(x)
        low = F.max_pool2d(x, 2, stride=2)
        low = self.low1(low)
        low = self.low2(low)
        low = self.low3(low)
        up2 = F.interpolate(low, size=up1.shape[-2:], mode="bilinear", align_corners=False)
        return up1 + up2


class HourglassNet(nn.Module):
    """Stem (7x7/2 conv, conv2, pool, conv3, conv4) -> hourglass -> head.

    Maps B x 3 x H x W to B x n_out x H/4 x W/4.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        s, c, k = spec.stem_channels, spec.channels, spec.kernel
        self.conv1 = nn.Conv2d(3, s, 7, stride=2, padding=3)
        self.bn1 = nn.BatchNorm2d(s)
        self.conv2 = ConvBlock(s, c, k)
        self.conv3 = ConvBlock(c, c, k)
        self.conv4 = ConvBlock(c, c, k)
        self.hourglass = Hourglass(spec.depth, c, k)
        self.top = ConvBlock(c, c, k)
        self.head = nn.Conv2d(c, spec.n_out, 1)

    def features(self, x):
        """The conv4 tap: B x channels x H/4 x W/4."""
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.conv2(x)
        x = F.max_pool2d(x, 2, stride=2)
        x = self.conv3(x)
        return self.conv4(x)

    def forward(self, x, return_taps: bool = False):
        f4 = self.features(x)
        out = self.head(self.top(self.hourglass(f4)))
        if return_taps:
            return out, {"conv4_features": f4}
        return out

    def replace_head(self, n_out: int, zero_init: bool = True) -> None:
        self.head = nn.Conv2d(self.spec.channels, n_out, 1)
        if zero_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.spec = NetworkSpec(**{**self.spec.to_dict(), "n_out": n_out})


def build_network(spec: NetworkSpec, seed: int = 0, mode: str = "scratch",
                  zero_head: bool = True) -> ModelBundle:
    """Deterministically initialise a network from ``seed``.

    The output layer starts at zero unless ``zero_head`` is False, so a fresh
    model predicts empty heatmaps instead of large random ones.
    """
    spec.validate()
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = HourglassNet(spec)
        if zero_head:
            nn.init.zeros_(net.head.weight)
            nn.init.zeros_(net.head.bias)
    finally:
        torch.random.set_rng_state(gen_state)
    arch = {"kind": "hourglass", "spec": spec.to_dict(), "n_out": spec.n_out}
    return ModelBundle(net=net, mode=mode, arch=arch, meta={"seed": seed})


def expected_input(batch: torch.Tensor, size: int | None = None) -> None:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected a B x 3 x H x W batch, got shape {tuple(batch.shape)}")
    if size is not None and batch.shape[-2:] != (size, size):
        raise ValueError(f"expected {size} x {size} images, got {tuple(batch.shape[-2:])}")
    if batch.shape[-1] % 4 or batch.shape[-2] % 4:
        raise ValueError("image height and width must be multiples of 4")


def forward(model: ModelBundle, batch: torch.Tensor):
    """Evaluation-mode forward; returns (heatmaps, taps)."""
    expected_input(batch)
    model.net.eval()
    with torch.no_grad():
        return model.net(batch, return_taps=True)


def count_parameters(model, trainable_only: bool = False) -> int:
    net = model.net if isinstance(model, ModelBundle) else model
    return sum(p.numel() for p in net.parameters() if p.requires_grad or not trainable_only)


def normalise(images: torch.Tensor) -> torch.Tensor:
    """uint8 (or [0, 255] float) B x 3 x H x W -> standardised float32."""
    x = images.float() / 255.0
    mean = torch.tensor(NORM_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(NORM_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std
