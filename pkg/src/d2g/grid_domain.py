"""Core value types shared across the package: grids, observations,
episodes and Zero-Inflated-Gamma distribution parameters.

All types are immutable value objects after construction (arrays are made
read-only), so they can be shared freely across parallel workers. Sampling
takes an explicit seed; there is no hidden global RNG state.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

# Clamp bounds for ZIG parameters. alpha/beta below PARAM_FLOOR or pi0 at
# exactly 0/1 would produce infinite log-likelihoods and degenerate CRPS.
PARAM_FLOOR = 1e-4
PI0_MIN = 1e-6
PI0_MAX = 1.0 - 1e-6

# Container format version for episode directories.
CONTAINER_FORMAT_VERSION = 1


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridSpec:
    """Regular raster geometry: cell counts, resolution and origin offset.

    Coordinates are an abstract regular grid; no geodetic projection is
    implied. ``origin`` is the (northing, easting) of cell (0, 0) in km.
    """

    height: int
    width: int
    cell_size_km: float = 4.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.height}x{self.width}")
        if self.cell_size_km <= 0:
            raise ValueError("cell_size_km must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def contains(self, cell: tuple[int, int]) -> bool:
        i, j = cell
        return 0 <= i < self.height and 0 <= j < self.width

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "cell_size_km": self.cell_size_km,
            "origin": list(self.origin),
        }

    @staticmethod
    def from_dict(d: dict) -> "GridSpec":
        return GridSpec(
            height=int(d["height"]),
            width=int(d["width"]),
            cell_size_km=float(d["cell_size_km"]),
            origin=tuple(float(x) for x in d["origin"]),
        )


@dataclass(frozen=True)
class RainField:
    """Hourly rainfall accumulation (mm) on a grid with a validity mask.

    Invalid cells carry a sentinel value that must never be read; valid
    cells are finite and non-negative.
    """

    spec: GridSpec
    values: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self) -> None:
        # float64 survives (analytical products keep full precision); any
        # other dtype lands on the container's float32
        dtype = np.float64 if np.asarray(self.values).dtype == np.float64 else np.float32
        values = np.asarray(self.values, dtype=dtype)
        valid = np.asarray(self.valid_mask, dtype=bool)
        if values.shape != self.spec.shape or valid.shape != self.spec.shape:
            raise ValueError(
                f"field shape {values.shape}/{valid.shape} does not match grid {self.spec.shape}"
            )
        v = values[valid]
        if v.size and (not np.all(np.isfinite(v)) or np.any(v < 0)):
            raise ValueError("valid cells must be finite and >= 0")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "valid_mask", _readonly(valid))

    @staticmethod
    def full(spec: GridSpec, values: np.ndarray) -> "RainField":
        """Field with every cell valid."""
        return RainField(spec, values, np.ones(spec.shape, dtype=bool))


def _as_f32_field(field: RainField) -> RainField:
    if field.values.dtype == np.float32:
        return field
    return RainField(field.spec, field.values.astype(np.float32), field.valid_mask)


@dataclass(frozen=True)
class StationObservation:
    """One station reading: grid cell, timestep index and rainfall in mm."""

    cell: tuple[int, int]
    timestep: int
    value: float
    station_id: str

    def __post_init__(self) -> None:
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"observation value must be finite and >= 0, got {self.value}")
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")


def mask_from_cells(cells: Iterable[tuple[int, int]], spec: GridSpec) -> np.ndarray:
    mask = np.zeros(spec.shape, dtype=bool)
    for i, j in cells:
        if not spec.contains((i, j)):
            raise ValueError(f"cell {(i, j)} outside grid {spec.shape}")
        mask[i, j] = True
    return mask


def cells_from_mask(mask: np.ndarray) -> set[tuple[int, int]]:
    ii, jj = np.nonzero(mask)
    return {(int(i), int(j)) for i, j in zip(ii, jj)}


@dataclass(frozen=True)
class Episode:
    """One training/eval sample.

    ``station_values``/``station_presence`` hold T timesteps of median-gridded
    station observations. ``context_mask`` marks the station cells used as
    model input at each timestep; ``target_mask`` the cells the loss or the
    metrics read at the last timestep; ``holdout_mask`` the cells excluded
    from inputs everywhere. ``truth`` is available for synthetic data only.

    ``holdout_targets`` distinguishes the two target regimes: False for
    train/val episodes, whose targets must avoid the holdout cells, and True
    for test episodes, whose targets are exactly the holdout cells with
    data. Holdout cells stay out of the context either way.
    """

    spec: GridSpec
    station_values: np.ndarray  # (T, H, W) float32
    station_presence: np.ndarray  # (T, H, W) bool
    radar: RainField
    context_mask: np.ndarray  # (T, H, W) bool
    target_mask: np.ndarray  # (H, W) bool
    holdout_mask: np.ndarray  # (H, W) bool
    truth: Optional[RainField] = None
    holdout_targets: bool = False

    def __post_init__(self) -> None:
        h, w = self.spec.shape
        sv = np.asarray(self.station_values, dtype=np.float32)
        sp = np.asarray(self.station_presence, dtype=bool)
        cm = np.asarray(self.context_mask, dtype=bool)
        tm = np.asarray(self.target_mask, dtype=bool)
        hm = np.asarray(self.holdout_mask, dtype=bool)
        if sv.ndim != 3 or sv.shape[1:] != (h, w):
            raise ValueError(f"station_values must be (T, {h}, {w}), got {sv.shape}")
        if sp.shape != sv.shape or cm.shape != sv.shape:
            raise ValueError("presence/context masks must match station_values shape")
        if tm.shape != (h, w) or hm.shape != (h, w):
            raise ValueError("target/holdout masks must be (H, W)")
        if np.any(cm & ~sp):
            raise ValueError("context_mask must be a subset of the station presence mask")
        if np.any(tm & cm[-1]):
            raise ValueError("target cells must not overlap last-timestep context")
        if self.holdout_targets:
            if np.any(tm & ~hm):
                raise ValueError("holdout-target episodes may only target holdout cells")
        elif np.any(tm & hm):
            raise ValueError("target cells must not overlap holdout cells")
        if np.any(cm & hm[None, :, :]):
            raise ValueError("holdout cells must never appear in the context")
        vals = sv[sp]
        if vals.size and (not np.all(np.isfinite(vals)) or np.any(vals < 0)):
            raise ValueError("present station values must be finite and >= 0")
        object.__setattr__(self, "station_values", _readonly(sv))
        object.__setattr__(self, "station_presence", _readonly(sp))
        object.__setattr__(self, "context_mask", _readonly(cm))
        object.__setattr__(self, "target_mask", _readonly(tm))
        object.__setattr__(self, "holdout_mask", _readonly(hm))
        # the episode container stores rasters as float32; normalize here so
        # a save/load round trip is lossless
        object.__setattr__(self, "radar", _as_f32_field(self.radar))
        if self.truth is not None:
            object.__setattr__(self, "truth", _as_f32_field(self.truth))

    @property
    def T(self) -> int:
        return self.station_values.shape[0]

    @property
    def target_cells(self) -> set[tuple[int, int]]:
        return cells_from_mask(self.target_mask)

    @property
    def holdout_cells(self) -> set[tuple[int, int]]:
        return cells_from_mask(self.holdout_mask)

    def target_values(self) -> np.ndarray:
        """Station values at target cells (last timestep), 1-D."""
        return self.station_values[-1][self.target_mask]

    def with_context(self, context_mask: np.ndarray, target_mask: np.ndarray) -> "Episode":
        """Same episode with different context/target masking."""
        return dataclasses.replace(self, context_mask=context_mask, target_mask=target_mask)


@dataclass(frozen=True)
class ZIGParams:
    """Per-cell (pi0, alpha, beta) of the Zero-Inflated Gamma distribution.

    Gamma uses the rate parameterization: density
    beta^alpha / Gamma(alpha) * y^(alpha-1) * exp(-beta y). Parameters are
    clamped at construction: pi0 into [PI0_MIN, PI0_MAX], alpha/beta floored
    at PARAM_FLOOR.
    """

    pi0: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self) -> None:
        pi0 = np.asarray(self.pi0, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if not (pi0.shape == alpha.shape == beta.shape):
            raise ValueError("pi0/alpha/beta must share a shape")
        if not (np.all(np.isfinite(pi0)) and np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise ValueError("ZIG parameters must be finite")
        pi0 = np.clip(pi0, PI0_MIN, PI0_MAX)
        alpha = np.maximum(alpha, PARAM_FLOOR)
        beta = np.maximum(beta, PARAM_FLOOR)
        object.__setattr__(self, "pi0", _readonly(pi0))
        object.__setattr__(self, "alpha", _readonly(alpha))
        object.__setattr__(self, "beta", _readonly(beta))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pi0.shape

    @property
    def rain_indicator(self) -> np.ndarray:
        """p = 1{1 - pi0 >= 0.5}; the >= makes the tie resolve to rain."""
        return ((1.0 - self.pi0) >= 0.5).astype(np.float64)


@dataclass(frozen=True)
class LatentField:
    """Dense multi-channel feature grid flowing through the model.

    ``values`` is (..., C, H, W) — optional leading batch/time axes.
    ``resolution_level`` k means the grid is downsampled by 2**k relative
    to the full episode resolution.
    """

    channels: int
    values: "object"  # torch.Tensor; kept untyped so numpy-only users never import torch
    resolution_level: int = 0

    def __post_init__(self) -> None:
        v = self.values
        if v.shape[-3] != self.channels:
            raise ValueError(f"channel axis {v.shape[-3]} != declared channels {self.channels}")
        if self.resolution_level < 0:
            raise ValueError("resolution_level must be >= 0")
        finite = bool(np.isfinite(np.asarray(v.detach() if hasattr(v, "detach") else v)).all())
        if not finite:
            raise ValueError("latent values must be finite")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])


def zig_mean_variance(params: ZIGParams) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance fields of the ZIG distribution.

    Uses the deterministic rain indicator p = 1{1 - pi0 >= 0.5}:
    mean = p * alpha / beta, variance = p * alpha / beta**2.
    """
    p = params.rain_indicator
    mean = p * params.alpha / params.beta
    variance = p * params.alpha / params.beta**2
    return mean, variance


def zig_sample(params: ZIGParams, seed: int, spec: Optional[GridSpec] = None) -> RainField:
    """Draw one rainfall field from the ZIG distribution.

    Per cell: Bernoulli(1 - pi0) rain occurrence, then Gamma(alpha, rate=beta)
    intensity. Reproducible for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    rain = rng.random(params.shape) < (1.0 - params.pi0)
    # numpy's gamma takes a scale parameter; rate -> scale = 1 / beta.
    intensity = rng.gamma(shape=params.alpha, scale=1.0 / params.beta)
    values = np.where(rain, intensity, 0.0)
    if spec is None:
        h, w = params.shape
        spec = GridSpec(height=h, width=w)
    return RainField.full(spec, values)


# ---------------------------------------------------------------------------
# Episode container format
#
# One directory per episode: manifest.json plus flat little-endian float32
# arrays in row-major (T, H, W) / (H, W) order and 8-bit masks, one file per
# field. File names are fixed; `truth` is optional. Round trips are bit-exact.
# ---------------------------------------------------------------------------

_FLOAT_FIELDS = ("stations_values", "radar", "truth")
_MASK_FIELDS = ("stations_mask", "context_mask", "target_mask", "holdout_mask")


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def _write_u8(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype=np.uint8).tofile(path)


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    return arr.reshape(shape)


def _read_u8(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    return np.fromfile(path, dtype=np.uint8).reshape(shape).astype(bool)


def save_episode(directory: str | Path, episode: Episode, extra_manifest: Optional[dict] = None) -> None:
    """Write an episode to its container directory (created if missing)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CONTAINER_FORMAT_VERSION,
        "grid": episode.spec.to_dict(),
        "T": episode.T,
        "has_truth": episode.truth is not None,
        "holdout_targets": episode.holdout_targets,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    _write_f32(d / "stations_values", episode.station_values)
    _write_u8(d / "stations_mask", episode.station_presence)
    _write_f32(d / "radar", episode.radar.values)
    _write_u8(d / "context_mask", episode.context_mask)
    _write_u8(d / "target_mask", episode.target_mask)
    _write_u8(d / "holdout_mask", episode.holdout_mask)
    if episode.truth is not None:
        _write_f32(d / "truth", episode.truth.values)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_episode(directory: str | Path) -> Episode:
    """Load an episode previously written by :func:`save_episode`."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest["format_version"] != CONTAINER_FORMAT_VERSION:
        raise ValueError(
            f"unsupported episode container version {manifest['format_version']}"
        )
    spec = GridSpec.from_dict(manifest["grid"])
    t = int(manifest["T"])
    h, w = spec.shape
    truth = None
    if manifest.get("has_truth"):
        truth = RainField.full(spec, _read_f32(d / "truth", (h, w)))
    return Episode(
        spec=spec,
        station_values=_read_f32(d / "stations_values", (t, h, w)),
        station_presence=_read_u8(d / "stations_mask", (t, h, w)),
        radar=RainField.full(spec, _read_f32(d / "radar", (h, w))),
        context_mask=_read_u8(d / "context_mask", (t, h, w)),
        target_mask=_read_u8(d / "target_mask", (h, w)),
        holdout_mask=_read_u8(d / "holdout_mask", (h, w)),
        truth=truth,
        holdout_targets=bool(manifest.get("holdout_targets", False)),
    )
