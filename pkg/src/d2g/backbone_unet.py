"""2-D U-Net backbone shared across timestep/modality slices, plus the
distribution head.

The encoder applies, per resolution level, a two-convolution residual block
followed by a 2x2 stride-2 downsampling convolution; every slice of a
stacked (batch x time x modality) input passes through the same weights.
The decoder upsamples with nearest-neighbor interpolation and merges each
skip with one convolution, then a final refinement convolution. There is no
normalization by default: feature statistics would couple spatial positions
and break strict shift equivariance. Channel width is constant.

The head is a pointwise MLP emitting the raw channels of the selected output
distribution; squashing maps keep the parameters inside their domains.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .grid_domain import PARAM_FLOOR, PI0_MAX, PI0_MIN

__all__ = [
    "UNetConfig",
    "ResBlock",
    "UNetEncoder",
    "UNetDecoder",
    "ParamHead",
    "count_parameters",
    "parameter_manifest",
]


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 32
    kernel_size: int = 3
    bottleneck_dropout: float = 0.1
    padding_mode: str = "zeros"
    norm: str = "none"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if not 0.0 <= self.bottleneck_dropout < 1.0:
            raise ValueError("bottleneck_dropout must be in [0, 1)")
        if self.padding_mode not in ("zeros", "circular"):
            raise ValueError(f"unsupported padding_mode {self.padding_mode!r}")
        if self.norm not in ("none", "channel"):
            raise ValueError(f"unsupported norm {self.norm!r}")

    @property
    def downsample_factor(self) -> int:
        return 2**self.depth


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.GroupNorm(num_groups=channels, num_channels=channels)


class ResBlock(nn.Module):
    """conv-act-conv with an identity skip; channel count is preserved."""

    def __init__(self, channels: int, kernel_size: int, padding_mode: str, norm: str):
        super().__init__()
        pad = kernel_size // 2
        self.norm1 = _norm_layer(norm, channels)
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad,
                               padding_mode=padding_mode)
        self.norm2 = _norm_layer(norm, channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad,
                               padding_mode=padding_mode)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class UNetEncoder(nn.Module):
    """Residual blocks with stride-2 downsampling; returns skips per level."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.blocks = nn.ModuleList(
            ResBlock(c, config.kernel_size, config.padding_mode, config.norm)
            for _ in range(config.depth)
        )
        # 2x2 stride-2 convolutions need no padding and stay aligned with
        # even-shift equivariance.
        self.downs = nn.ModuleList(
            nn.Conv2d(c, c, kernel_size=2, stride=2) for _ in range(config.depth)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        f = self.config.downsample_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by {f}"
            )
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return x, skips


class UNetDecoder(nn.Module):
    """Nearest-neighbor upsampling with one merge convolution per level."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        pad = config.kernel_size // 2
        self.merges = nn.ModuleList(
            nn.Conv2d(2 * c, c, config.kernel_size, padding=pad,
                      padding_mode=config.padding_mode)
            for _ in range(config.depth)
        )
        self.refine = nn.Conv2d(c, c, config.kernel_size, padding=pad,
                                padding_mode=config.padding_mode)
        self.dropout = nn.Dropout(config.bottleneck_dropout)
        self.act = nn.GELU()

    def forward(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != self.config.depth:
            raise ValueError(f"expected {self.config.depth} skips, got {len(skips)}")
        x = self.dropout(bottleneck)
        for merge, skip in zip(self.merges, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.act(merge(torch.cat([skip, x], dim=1)))
        return self.refine(x)


class ParamHead(nn.Module):
    """Pointwise MLP from decoder features to distribution parameters.

    zig: (pi0, alpha, beta); gamma: (alpha, beta); gaussian: (mu, sigma).
    """

    def __init__(self, channels: int, distribution: str = "zig"):
        super().__init__()
        out_channels = {"zig": 3, "gamma": 2, "gaussian": 2}.get(distribution)
        if out_channels is None:
            raise ValueError(f"unknown distribution {distribution!r}")
        self.distribution = distribution
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(channels, out_channels, kernel_size=1),
        )

    def forward(self, features: torch.Tensor) -> dict[str, torch.Tensor]:
        raw = self.mlp(features)
        if self.distribution == "zig":
            pi0 = torch.sigmoid(raw[:, 0]).clamp(PI0_MIN, PI0_MAX)
            alpha = F.softplus(raw[:, 1]) + PARAM_FLOOR
            beta = F.softplus(raw[:, 2]) + PARAM_FLOOR
            return {"pi0": pi0, "alpha": alpha, "beta": beta}
        if self.distribution == "gamma":
            alpha = F.softplus(raw[:, 0]) + PARAM_FLOOR
            beta = F.softplus(raw[:, 1]) + PARAM_FLOOR
            return {"alpha": alpha, "beta": beta}
        mu = raw[:, 0]
        sigma = F.softplus(raw[:, 1]) + PARAM_FLOOR
        return {"mu": mu, "sigma": sigma}


def count_parameters(module: nn.Module) -> int:
    """Trainable parameter count."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_manifest(module: nn.Module) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, count) per trainable parameter, for auditing."""
    return [
        (name, tuple(p.shape), p.numel())
        for name, p in module.named_parameters()
        if p.requires_grad
    ]
