"""End-to-end densification models.

The fusion model: each station timestep and the radar frame are set-conv
encoded, pushed through one shared U-Net encoder (slices stacked along the
batch axis), fused at the bottleneck (temporal attention over station
features, gated cross-attention onto radar, fusion transformer), then decoded
once at the last station timestep using that slice's skip connections.

The pixel-merge model is the structural foil: the same encoders, but all
slices concatenated channel-wise at full resolution and fed to a single U-Net
pass with a convolutional bottleneck block in place of any attention.

Inputs are batched tensors: station_values/station_context (B, T, H, W),
radar_values/radar_valid (B, H, W). The output is the head's parameter dict,
each field (B, H, W).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone_unet import ParamHead, ResBlock, UNetConfig, UNetDecoder, UNetEncoder
from .fusion_bottleneck import (
    AttentionConfig,
    FusionTransformer,
    GatedCrossAttention,
    TemporalSummarizer,
)
from .setconv_encoder import ModalityEncoder

__all__ = ["ModelConfig", "FusionModel", "PixelMergeModel", "build_model"]

DISTRIBUTIONS = ("zig", "gamma", "gaussian")
MODEL_KINDS = ("fusion", "pixel_merge")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    timesteps: int = 4
    distribution: str = "zig"
    model_kind: str = "fusion"
    te_attention: bool = True
    use_radar: bool = True
    padding_mode: str = "zeros"
    setconv_kernel_size: int = 9
    unet_depth: int = 3
    unet_kernel_size: int = 3
    bottleneck_dropout: float = 0.1
    heads: int = 8
    head_dim: int = 8
    fusion_depth: int = 2
    ff_multiplier: int = 2
    attention_dropout: float = 0.1
    # grid shape at the bottleneck; needed only by the absolute-position
    # attention variant, which cannot be size-agnostic
    bottleneck_hw: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.model_kind == "fusion" and not self.te_attention \
                and self.bottleneck_hw is None:
            raise ValueError("non-TE attention requires bottleneck_hw")
        if self.bottleneck_hw is not None:
            object.__setattr__(self, "bottleneck_hw", tuple(self.bottleneck_hw))
        # delegate range checks
        self.unet_config()
        self.attention_config()

    @property
    def downsample_factor(self) -> int:
        return 2**self.unet_depth

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            depth=self.unet_depth,
            base_channels=self.channels,
            kernel_size=self.unet_kernel_size,
            bottleneck_dropout=self.bottleneck_dropout,
            padding_mode=self.padding_mode,
        )

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            heads=self.heads,
            head_dim=self.head_dim,
            depth=self.fusion_depth,
            ff_multiplier=self.ff_multiplier,
            dropout=self.attention_dropout,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["bottleneck_hw"] is not None:
            d["bottleneck_hw"] = list(d["bottleneck_hw"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("bottleneck_hw") is not None:
            d["bottleneck_hw"] = tuple(d["bottleneck_hw"])
        return cls(**d)


def _check_inputs(config: ModelConfig, station_values, station_context,
                  radar_values) -> tuple[int, int, int, int]:
    if station_values.ndim != 4:
        raise ValueError("station_values must be (B, T, H, W)")
    b, t, h, w = station_values.shape
    if t != config.timesteps:
        raise ValueError(f"got {t} timesteps, model built for {config.timesteps}")
    if station_context.shape != station_values.shape:
        raise ValueError("station_context must match station_values shape")
    if radar_values.shape != (b, h, w):
        raise ValueError("radar_values must be (B, H, W)")
    return b, t, h, w


class FusionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.model_kind != "fusion":
            raise ValueError("config.model_kind must be 'fusion'")
        self.config = config
        c = config.channels
        self.station_encoder = ModalityEncoder(c, config.setconv_kernel_size,
                                               config.padding_mode)
        self.radar_encoder = ModalityEncoder(c, config.setconv_kernel_size,
                                             config.padding_mode)
        uc = config.unet_config()
        self.encoder = UNetEncoder(uc)
        self.decoder = UNetDecoder(uc)
        ac = config.attention_config()
        wrap = config.padding_mode == "circular"
        self.temporal = TemporalSummarizer(c, config.timesteps, ac)
        self.cross = GatedCrossAttention(c, ac, te=config.te_attention,
                                         wrap_displacements=wrap,
                                         bottleneck_hw=config.bottleneck_hw)
        self.fuse = FusionTransformer(c, ac, te=config.te_attention,
                                      wrap_displacements=wrap,
                                      bottleneck_hw=config.bottleneck_hw)
        self.head = ParamHead(c, config.distribution)

    def forward(self, station_values: torch.Tensor, station_context: torch.Tensor,
                radar_values: torch.Tensor,
                radar_valid: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
        cfg = self.config
        b, t, h, w = _check_inputs(cfg, station_values, station_context, radar_values)
        if radar_valid is None:
            radar_valid = torch.ones_like(radar_values)
        sv = station_values.reshape(b * t, h, w)
        sc = station_context.reshape(b * t, h, w).to(station_values.dtype)
        e_s = self.station_encoder(sv, sc)
        if cfg.use_radar:
            e_r = self.radar_encoder(radar_values, radar_valid)
            stacked = torch.cat([e_s, e_r], dim=0)
        else:
            stacked = e_s
        bottleneck, skips = self.encoder(stacked)
        _, c, hp, wp = bottleneck.shape
        s_bottle = bottleneck[:b * t].view(b, t, c, hp, wp)
        s_summary = self.temporal(s_bottle)
        if cfg.use_radar:
            r_corrected = self.cross(s_summary, bottleneck[b * t:])
        else:
            r_corrected = torch.zeros_like(s_summary)
        z = self.fuse(s_summary, r_corrected, s_bottle[:, -1])
        last_skips = [s[:b * t].view(b, t, *s.shape[1:])[:, -1] for s in skips]
        return self.head(self.decoder(z, last_skips))


class PixelMergeModel(nn.Module):
    """All slices concatenated at full resolution; no attention anywhere."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.model_kind != "pixel_merge":
            raise ValueError("config.model_kind must be 'pixel_merge'")
        self.config = config
        c = config.channels
        self.station_encoder = ModalityEncoder(c, config.setconv_kernel_size,
                                               config.padding_mode)
        self.radar_encoder = ModalityEncoder(c, config.setconv_kernel_size,
                                             config.padding_mode)
        # the radar slot stays even when the radar branch is zeroed, so the
        # parameter shapes match across the use_radar switch
        self.merge = nn.Conv2d((config.timesteps + 1) * c, c, kernel_size=1)
        uc = config.unet_config()
        self.encoder = UNetEncoder(uc)
        self.decoder = UNetDecoder(uc)
        self.bottleneck_block = ResBlock(c, uc.kernel_size, uc.padding_mode, uc.norm)
        self.head = ParamHead(c, config.distribution)

    def forward(self, station_values: torch.Tensor, station_context: torch.Tensor,
                radar_values: torch.Tensor,
                radar_valid: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
        cfg = self.config
        b, t, h, w = _check_inputs(cfg, station_values, station_context, radar_values)
        if radar_valid is None:
            radar_valid = torch.ones_like(radar_values)
        sv = station_values.reshape(b * t, h, w)
        sc = station_context.reshape(b * t, h, w).to(station_values.dtype)
        e_s = self.station_encoder(sv, sc).view(b, -1, h, w)
        if cfg.use_radar:
            e_r = self.radar_encoder(radar_values, radar_valid)
        else:
            e_r = torch.zeros(b, cfg.channels, h, w, dtype=e_s.dtype,
                              device=e_s.device)
        x = self.merge(torch.cat([e_s, e_r], dim=1))
        bottleneck, skips = self.encoder(x)
        return self.head(self.decoder(self.bottleneck_block(bottleneck), skips))


def build_model(config: ModelConfig) -> nn.Module:
    if config.model_kind == "fusion":
        return FusionModel(config)
    return PixelMergeModel(config)
