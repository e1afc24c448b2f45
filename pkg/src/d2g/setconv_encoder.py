"""Density-normalized set convolution and pointwise modality embeddings.

A sparse observation grid enters as (values, presence-mask). One non-negative
spatial kernel is convolved with both the masked values and the mask itself;
the value channel is divided by the mask channel, so overlapping observations
are averaged instead of summed, and the mask channel survives as an
observation-density feature. A pointwise MLP then lifts the two channels to
the model width. Stations and radar get independent kernels and MLPs.

Non-negativity is enforced by squaring the raw kernel weights. Padding is
zeros in production; the circular mode exists for exact shift-equivariance
tests.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["SetConvKernel", "setconv", "ModalityEncoder"]

EPSILON = 1e-8


def _gaussian_bump(kernel_size: int, length_scale: float) -> torch.Tensor:
    r = kernel_size // 2
    ax = torch.arange(kernel_size, dtype=torch.float64) - r
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    return torch.exp(-0.5 * d2 / length_scale**2)


class SetConvKernel(nn.Module):
    """Learnable non-negative spatial kernel; weights are raw values squared.

    Initialized so the effective weights form a discretized isotropic
    Gaussian with a one-cell length scale.
    """

    def __init__(self, kernel_size: int = 9, epsilon: float = EPSILON,
                 padding_mode: str = "zeros"):
        super().__init__()
        if kernel_size % 2 != 1 or kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if padding_mode not in ("zeros", "circular"):
            raise ValueError(f"unsupported padding_mode {padding_mode!r}")
        self.kernel_size = kernel_size
        self.epsilon = epsilon
        self.padding_mode = padding_mode
        bump = _gaussian_bump(kernel_size, length_scale=1.0)
        self.raw_weights = nn.Parameter(torch.sqrt(bump).to(torch.float32))

    def effective_weights(self) -> torch.Tensor:
        return self.raw_weights**2

    def _conv(self, x: torch.Tensor) -> torch.Tensor:
        w = self.effective_weights().to(x.dtype)[None, None]
        pad = self.kernel_size // 2
        if self.padding_mode == "circular":
            x = F.pad(x, (pad, pad, pad, pad), mode="circular")
            return F.conv2d(x, w)
        return F.conv2d(x, w, padding=pad)


def setconv(values: torch.Tensor, mask: torch.Tensor, kernel: SetConvKernel) -> torch.Tensor:
    """(B, H, W) values + presence mask -> (B, 2, H, W) normalized latent.

    Channel 0 is the density-normalized signal, channel 1 the raw density.
    """
    if values.shape != mask.shape or values.ndim != 3:
        raise ValueError("values and mask must both be (B, H, W)")
    mask = mask.to(values.dtype)
    signal = kernel._conv((values * mask)[:, None])
    density = kernel._conv(mask[:, None])
    normalized = signal / (density + kernel.epsilon)
    return torch.cat([normalized, density], dim=1)


class ModalityEncoder(nn.Module):
    """SetConv followed by a pointwise two-layer MLP to ``channels``."""

    def __init__(self, channels: int = 32, kernel_size: int = 9,
                 padding_mode: str = "zeros"):
        super().__init__()
        self.kernel = SetConvKernel(kernel_size, padding_mode=padding_mode)
        self.embed = nn.Sequential(
            nn.Conv2d(2, channels, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(channels, channels, kernel_size=1),
        )

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.embed(setconv(values, mask, self.kernel))
