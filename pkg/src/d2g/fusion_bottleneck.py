"""Bottleneck fusion: temporal attention over station features, gated
translation-equivariant cross-attention onto radar, and a fusion transformer.

All attention here is global over the coarse bottleneck grid. The
translation-equivariant (TE) variant never sees absolute coordinates: each
logit comes from a small pairwise MLP applied to the normalized displacement
between two cells and the scaled dot-product similarity of their features, so
jointly shifting every input shifts the output. The non-TE variant used by an
ablation replaces this with plain dot-product attention plus learned absolute
position embeddings, which requires the bottleneck shape at build time.

Channel width C and projection width heads*head_dim are independent; all
projections map C -> heads*head_dim -> C. Normalization is per-position
LayerNorm over channels, which commutes with spatial shifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

__all__ = [
    "AttentionConfig",
    "ChannelLayerNorm",
    "FeedForward",
    "normalized_displacements",
    "TEAttention",
    "TemporalSummarizer",
    "GatedCrossAttention",
    "FusionTransformer",
]


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    head_dim: int = 8
    depth: int = 2
    ff_multiplier: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.heads, self.head_dim, self.depth, self.ff_multiplier) < 1:
            raise ValueError("heads, head_dim, depth, ff_multiplier must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def proj_width(self) -> int:
        return self.heads * self.head_dim


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel vector at each spatial position."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class FeedForward(nn.Module):
    """Pre-norm residual position-wise feed-forward block on (B,C,H,W)."""

    def __init__(self, channels: int, multiplier: int, dropout: float):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.fc1 = nn.Conv2d(channels, multiplier * channels, kernel_size=1)
        self.fc2 = nn.Conv2d(multiplier * channels, channels, kernel_size=1)
        self.act = nn.GELU()
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(self.drop(self.act(self.fc1(self.norm(x)))))


def normalized_displacements(h: int, w: int, wrap: bool = False) -> torch.Tensor:
    """(N, N, 2) pairwise (dx, dy) between grid cells, normalized by max(h, w).

    With ``wrap`` the shorter way around a torus is used, which makes jointly
    circularly shifted inputs see identical displacements.
    """
    rows, cols = torch.meshgrid(
        torch.arange(h, dtype=torch.float64),
        torch.arange(w, dtype=torch.float64),
        indexing="ij",
    )
    rows = rows.reshape(-1)
    cols = cols.reshape(-1)
    dy = rows[:, None] - rows[None, :]
    dx = cols[:, None] - cols[None, :]
    if wrap:
        dy = torch.remainder(dy + h // 2, h) - h // 2
        dx = torch.remainder(dx + w // 2, w) - w // 2
    return torch.stack([dx, dy], dim=-1) / float(max(h, w))


class TEAttention(nn.Module):
    """Global spatial attention between two feature maps on the same grid.

    te=True: logits come from the pairwise MLP on (dx, dy, q.k/sqrt(d));
    head h reads output channel h of the shared MLP.
    te=False: logits are plain scaled dot products, with learned absolute
    position embeddings added to both sources first (shape fixed at build).
    """

    def __init__(self, channels: int, config: AttentionConfig, te: bool = True,
                 wrap_displacements: bool = False,
                 bottleneck_hw: tuple[int, int] | None = None):
        super().__init__()
        self.config = config
        self.te = te
        self.wrap_displacements = wrap_displacements
        pw = config.proj_width
        self.to_q = nn.Linear(channels, pw)
        self.to_k = nn.Linear(channels, pw)
        self.to_v = nn.Linear(channels, pw)
        self.out = nn.Linear(pw, channels)
        self.drop = nn.Dropout(config.dropout)
        if te:
            self.pairwise = nn.Sequential(
                nn.Linear(3, 16), nn.GELU(),
                nn.Linear(16, 16), nn.GELU(),
                nn.Linear(16, config.heads),
            )
        else:
            if bottleneck_hw is None:
                raise ValueError("non-TE attention needs bottleneck_hw for its "
                                 "position embeddings")
            h, w = bottleneck_hw
            self.q_pos = nn.Parameter(torch.randn(channels, h, w) * 0.02)
            self.kv_pos = nn.Parameter(torch.randn(channels, h, w) * 0.02)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor,
                return_weights: bool = False):
        b, c, h, w = q_src.shape
        if kv_src.shape != q_src.shape:
            raise ValueError("query and key/value maps must share shape")
        if not self.te:
            if self.q_pos.shape[-2:] != (h, w):
                raise ValueError(
                    f"grid {(h, w)} does not match position embeddings "
                    f"{tuple(self.q_pos.shape[-2:])}"
                )
            q_src = q_src + self.q_pos
            kv_src = kv_src + self.kv_pos
        n = h * w
        heads, d = self.config.heads, self.config.head_dim

        def split(proj, src):
            tokens = src.flatten(2).transpose(1, 2)
            return proj(tokens).view(b, n, heads, d).transpose(1, 2)

        q = split(self.to_q, q_src)
        k = split(self.to_k, kv_src)
        v = split(self.to_v, kv_src)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if self.te:
            delta = normalized_displacements(h, w, self.wrap_displacements)
            delta = delta.to(dtype=scores.dtype, device=scores.device)
            pair_in = torch.cat(
                [delta.expand(b, heads, n, n, 2), scores.unsqueeze(-1)], dim=-1
            )
            raw = self.pairwise(pair_in)  # (b, heads, n, n, heads)
            logits = torch.diagonal(raw, dim1=1, dim2=4).permute(0, 3, 1, 2)
        else:
            logits = scores
        attn = torch.softmax(logits, dim=-1)
        merged = (attn @ v).transpose(1, 2).reshape(b, n, heads * d)
        out = self.drop(self.out(merged))
        out = out.transpose(1, 2).view(b, c, h, w)
        if return_weights:
            return out, attn
        return out


class TemporalSummarizer(nn.Module):
    """Per-pixel attention over timesteps with a learned per-head query.

    Keys and values see the features plus a learned per-timestep embedding;
    the query is input-independent, so the summary is a data-weighted average
    over time followed by a residual feed-forward block.
    """

    def __init__(self, channels: int, timesteps: int, config: AttentionConfig):
        super().__init__()
        if timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        self.config = config
        self.timesteps = timesteps
        pw = config.proj_width
        self.pos = nn.Parameter(torch.randn(timesteps, channels) * 0.02)
        self.to_k = nn.Linear(channels, pw)
        self.to_v = nn.Linear(channels, pw)
        self.query = nn.Parameter(torch.randn(config.heads, config.head_dim) * 0.02)
        self.out = nn.Linear(pw, channels)
        self.ff = FeedForward(channels, config.ff_multiplier, config.dropout)

    def attend(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pre-feed-forward summary and the (B*H*W, heads, T) attention."""
        if s.ndim != 5:
            raise ValueError("expected (B, T, C, H', W') features")
        b, t, c, h, w = s.shape
        if t != self.timesteps:
            raise ValueError(f"got {t} timesteps, built for {self.timesteps}")
        heads, d = self.config.heads, self.config.head_dim
        kv_src = s + self.pos[None, :, :, None, None]
        tokens = kv_src.permute(0, 3, 4, 1, 2).reshape(b * h * w, t, c)
        k = self.to_k(tokens).view(-1, t, heads, d).transpose(1, 2)
        v = self.to_v(tokens).view(-1, t, heads, d).transpose(1, 2)
        logits = torch.einsum("bhtd,hd->bht", k, self.query.to(k.dtype))
        attn = torch.softmax(logits / math.sqrt(d), dim=-1)
        merged = torch.einsum("bht,bhtd->bhd", attn, v).reshape(-1, heads * d)
        summary = self.out(merged).view(b, h, w, c).permute(0, 3, 1, 2)
        return summary, attn

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        summary, _ = self.attend(s)
        return self.ff(summary)


class GatedCrossAttention(nn.Module):
    """Stations query radar; a pointwise sigmoid gate rescales the answer.

    The gate sees both the station summary and the attended radar, so it can
    suppress radar in regions the stations contradict. No residual: with the
    gate shut the radar contribution is exactly zero.
    """

    def __init__(self, channels: int, config: AttentionConfig, te: bool = True,
                 wrap_displacements: bool = False,
                 bottleneck_hw: tuple[int, int] | None = None):
        super().__init__()
        self.norm_q = ChannelLayerNorm(channels)
        self.norm_kv = ChannelLayerNorm(channels)
        self.attn = TEAttention(channels, config, te=te,
                                wrap_displacements=wrap_displacements,
                                bottleneck_hw=bottleneck_hw)
        self.gate = nn.Sequential(
            nn.Conv2d(2 * channels, 16, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(16, 1, kernel_size=1),
            nn.Sigmoid(),
        )

    def parts(self, s_summary: torch.Tensor, radar: torch.Tensor):
        r_hat = self.attn(self.norm_q(s_summary), self.norm_kv(radar))
        gate = self.gate(torch.cat([s_summary, r_hat], dim=1))
        return r_hat, gate

    def forward(self, s_summary: torch.Tensor, radar: torch.Tensor) -> torch.Tensor:
        r_hat, gate = self.parts(s_summary, radar)
        return r_hat * gate


class _FusionBlock(nn.Module):
    def __init__(self, channels: int, config: AttentionConfig, te: bool,
                 wrap_displacements: bool, bottleneck_hw):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.attn = TEAttention(channels, config, te=te,
                                wrap_displacements=wrap_displacements,
                                bottleneck_hw=bottleneck_hw)
        self.ff = FeedForward(channels, config.ff_multiplier, config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        x = x + self.attn(h, h)
        return self.ff(x)


class FusionTransformer(nn.Module):
    """Merge (station summary, corrected radar, last station features)."""

    def __init__(self, channels: int, config: AttentionConfig, te: bool = True,
                 wrap_displacements: bool = False,
                 bottleneck_hw: tuple[int, int] | None = None):
        super().__init__()
        self.proj = nn.Conv2d(3 * channels, channels, kernel_size=1)
        self.blocks = nn.ModuleList(
            _FusionBlock(channels, config, te, wrap_displacements, bottleneck_hw)
            for _ in range(config.depth)
        )

    def forward(self, s_summary: torch.Tensor, r_corrected: torch.Tensor,
                s_last: torch.Tensor) -> torch.Tensor:
        if not s_summary.shape == r_corrected.shape == s_last.shape:
            raise ValueError("fusion inputs must share shape")
        x = self.proj(torch.cat([s_summary, r_corrected, s_last], dim=1))
        for block in self.blocks:
            x = block(x)
        return x
