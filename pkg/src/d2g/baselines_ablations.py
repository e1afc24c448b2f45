"""Comparison baselines and the ablation switchboard.

Inverse-distance weighting is the classical reference interpolator. The
pixel-merge model (built in the model module and re-exported here) is the
structural foil without any attention. Every other variant is a named delta
on the main model config, applied here so experiments state intent by name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .grid_domain import GridSpec, RainField
from .model import ModelConfig, PixelMergeModel, build_model  # noqa: F401

__all__ = [
    "ABLATION_NAMES",
    "AblationSpec",
    "apply_ablation",
    "idw_densify",
    "PixelMergeModel",
]

ABLATION_NAMES = (
    "full",
    "no_bottleneck",
    "no_stations",
    "no_radar",
    "no_te",
    "target_inputs",
    "gamma",
    "gaussian",
)


@dataclass(frozen=True)
class AblationSpec:
    name: str

    def __post_init__(self):
        if self.name not in ABLATION_NAMES:
            raise ValueError(
                f"unknown ablation {self.name!r}; expected one of {ABLATION_NAMES}"
            )

    @property
    def target_inputs(self) -> bool:
        """True when the loss must also score last-timestep context cells."""
        return self.name == "target_inputs"


def apply_ablation(base: ModelConfig, ablation: Union[str, AblationSpec],
                   grid_shape: Optional[tuple[int, int]] = None) -> ModelConfig:
    """Model config for the named variant; differs in one subsystem only.

    ``grid_shape`` is needed only by no_te, whose absolute position
    embeddings are sized to the bottleneck of a fixed grid.
    """
    spec = ablation if isinstance(ablation, AblationSpec) else AblationSpec(ablation)
    name = spec.name
    if name in ("full", "target_inputs"):
        # target_inputs changes the loss's target selection, not the model
        return base
    if name == "no_bottleneck":
        return dataclasses.replace(base, model_kind="pixel_merge")
    if name == "no_stations":
        return dataclasses.replace(base, timesteps=1)
    if name == "no_radar":
        return dataclasses.replace(base, use_radar=False)
    if name == "no_te":
        if grid_shape is None:
            raise ValueError("no_te needs grid_shape to size position embeddings")
        f = base.downsample_factor
        h, w = grid_shape
        if h % f or w % f:
            raise ValueError(f"grid {grid_shape} not divisible by {f}")
        return dataclasses.replace(base, te_attention=False,
                                   bottleneck_hw=(h // f, w // f))
    if name == "gamma":
        return dataclasses.replace(base, distribution="gamma")
    return dataclasses.replace(base, distribution="gaussian")


def idw_densify(values: np.ndarray, mask: np.ndarray, spec: GridSpec,
                power: float = 2.0,
                max_radius: Optional[float] = None) -> RainField:
    """Inverse-distance-weighted interpolation of station values to the grid.

    Weights are dist^(-power) in cell units (ratios are unit-free). Station
    cells return their own value exactly; with ``max_radius``, cells farther
    than that from every station get 0.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = spec.shape
    if values.shape != (h, w) or mask.shape != (h, w):
        raise ValueError(f"values and mask must be ({h}, {w})")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("IDW needs at least one station")
    v = values[rows, cols]
    gr, gc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    d2 = (gr[..., None] - rows) ** 2 + (gc[..., None] - cols) ** 2
    d = np.sqrt(d2)
    # exact hits are overwritten below; keep their weight finite meanwhile
    weights = np.where(d == 0, 1.0, d) ** (-power)
    weights[d == 0] = 0.0
    wsum = weights.sum(axis=-1)
    out = np.zeros((h, w))
    interp = wsum > 0
    out[interp] = (weights * v).sum(axis=-1)[interp] / wsum[interp]
    out[mask] = values[mask]
    if max_radius is not None:
        beyond = np.sqrt(d2.min(axis=-1)) > max_radius
        out[beyond] = 0.0
    return RainField.full(spec, out)
