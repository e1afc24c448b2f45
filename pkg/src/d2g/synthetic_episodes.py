"""Synthetic rainfall truth, sensor simulation, and episode assembly.

Truth fields are sums of advected anisotropic Gaussian rain cells with
log-normal peaks, cut off below a small intensity so most cells are exactly
zero. Stations observe the truth through persistent multiplicative bias,
hourly log-normal noise, dropout, and rare spurious outliers. Radar is the
truth passed through a reflectivity round trip (Z = a R^b) with gain bias,
beam smoothing, and wedge-shaped blockage, so it is dense but systematically
wrong in ways stations can correct.

Episode protocol: a fixed station layout is drawn once per dataset, a fixed
holdout subset of station cells is excluded from every input, the remaining
station cells are randomly subsampled per episode to form the context, and
targets are last-timestep station cells outside context and holdout (train
and val) or holdout cells (test). Timeline splits use repeating
train/val/test blocks separated by blackout gaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.ndimage import shift as ndimage_shift

from .grid_domain import (
    Episode,
    GridSpec,
    RainField,
    StationObservation,
    load_episode,
    mask_from_cells,
    save_episode,
)

__all__ = [
    "StormFieldConfig",
    "SensorNoiseConfig",
    "SplitPlan",
    "DatasetConfig",
    "DatasetIndex",
    "generate_truth_sequence",
    "draw_station_layout",
    "simulate_stations",
    "simulate_radar",
    "grid_stations",
    "build_episode",
    "remask_episode",
    "split_blocks",
    "split_timeline",
    "nested_density_masks",
    "write_dataset",
    "read_dataset",
    "load_split",
]

DATASET_FORMAT_VERSION = 1

# Seed-stream salts so every stochastic stage gets an independent stream
# derived from the single dataset seed.
_SALT_TRUTH = 11
_SALT_LAYOUT = 12
_SALT_STATIONS = 13
_SALT_HOLDOUT = 14
_SALT_EPISODE = 15
_SALT_RADAR = 16


def _check_interval(lo, hi, name, positive=False):
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValueError(f"{name} must be a nonempty interval, got ({lo}, {hi})")
    if positive and lo <= 0:
        raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class StormFieldConfig:
    n_cells_range: tuple[int, int] = (2, 6)
    cell_sigma_km_range: tuple[float, float] = (8.0, 24.0)
    peak_intensity_lognormal: tuple[float, float] = (1.5, 0.85)
    advection_velocity_kmph: tuple[tuple[float, float], tuple[float, float]] = (
        (-30.0, 30.0),
        (-30.0, 30.0),
    )
    dry_probability: float = 0.1
    # Below the cutoff a cell is exactly zero; this sets the zero inflation.
    zero_cutoff_mm: float = 0.1
    storm_lifetime_hours_range: tuple[int, int] = (6, 24)

    def __post_init__(self):
        if self.n_cells_range[0] < 1 or self.n_cells_range[0] > self.n_cells_range[1]:
            raise ValueError("n_cells_range must be a nonempty range of counts >= 1")
        _check_interval(*self.cell_sigma_km_range, "cell_sigma_km_range", positive=True)
        if self.peak_intensity_lognormal[1] < 0:
            raise ValueError("log-intensity sigma must be >= 0")
        for axis in self.advection_velocity_kmph:
            _check_interval(*axis, "advection_velocity_kmph")
        if not 0.0 <= self.dry_probability <= 1.0:
            raise ValueError("dry_probability must be in [0, 1]")
        if self.zero_cutoff_mm < 0:
            raise ValueError("zero_cutoff_mm must be >= 0")
        lo, hi = self.storm_lifetime_hours_range
        if lo < 1 or lo > hi:
            raise ValueError("storm_lifetime_hours_range must be nonempty, >= 1")


@dataclass(frozen=True)
class SensorNoiseConfig:
    station_multiplicative_sigma: float = 0.25
    station_bias_range: tuple[float, float] = (0.7, 1.3)
    station_dropout_prob: float = 0.1
    station_outlier_prob: float = 0.01
    station_outlier_value_range: tuple[float, float] = (10.0, 50.0)
    radar_mp_a: float = 200.0
    radar_mp_b: float = 1.6
    radar_smoothing_sigma_cells: float = 2.0
    radar_gain_bias: float = 0.6
    # Per-field log-normal jitter around the systematic gain so radar
    # reliability varies between episodes. The reflectivity exponent
    # compresses Z-space gain by 1/b in rain space, so this must be large
    # to produce meaningful rain-rate swings.
    radar_gain_jitter_sigma: float = 0.6
    radar_blockage_sectors: int = 1
    # Smooth log-normal gain surface: reflectivity is regionally over- or
    # under-amplified, so a fixed inverse map cannot undo it. The correlation
    # scale is deliberately coarse; recovering the local gain requires
    # comparing radar against nearby gauges over a neighbourhood.
    radar_gain_field_sigma: float = 0.6
    radar_gain_field_scale_cells: float = 16.0
    # Ground-clutter episodes: false echo blobs with no rain beneath them.
    radar_clutter_prob: float = 0.1
    radar_clutter_blobs: int = 3
    radar_clutter_intensity_mm: tuple[float, float] = (1.0, 5.0)
    # Wind drift: echoes are measured aloft and the rain below has moved by
    # an unknown per-episode offset before reaching the ground, so the fine
    # spatial alignment of radar against gauges cannot be trusted.
    radar_displacement_sigma_cells: float = 2.0

    def __post_init__(self):
        if self.station_multiplicative_sigma < 0:
            raise ValueError("station_multiplicative_sigma must be >= 0")
        _check_interval(*self.station_bias_range, "station_bias_range", positive=True)
        for p in (self.station_dropout_prob, self.station_outlier_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        _check_interval(
            *self.station_outlier_value_range, "station_outlier_value_range", positive=True
        )
        if self.radar_mp_a <= 0 or self.radar_mp_b <= 0:
            raise ValueError("reflectivity-law parameters must be positive")
        if self.radar_smoothing_sigma_cells < 0:
            raise ValueError("radar_smoothing_sigma_cells must be >= 0")
        if self.radar_gain_bias <= 0:
            raise ValueError("radar_gain_bias must be positive")
        if self.radar_gain_jitter_sigma < 0:
            raise ValueError("radar_gain_jitter_sigma must be >= 0")
        if self.radar_blockage_sectors < 0:
            raise ValueError("radar_blockage_sectors must be >= 0")
        if self.radar_gain_field_sigma < 0:
            raise ValueError("radar_gain_field_sigma must be >= 0")
        if self.radar_gain_field_scale_cells <= 0:
            raise ValueError("radar_gain_field_scale_cells must be positive")
        if not 0.0 <= self.radar_clutter_prob <= 1.0:
            raise ValueError("radar_clutter_prob must be in [0, 1]")
        if self.radar_clutter_blobs < 0:
            raise ValueError("radar_clutter_blobs must be >= 0")
        _check_interval(
            *self.radar_clutter_intensity_mm, "radar_clutter_intensity_mm", positive=True
        )
        if self.radar_displacement_sigma_cells < 0:
            raise ValueError("radar_displacement_sigma_cells must be >= 0")


@dataclass(frozen=True)
class SplitPlan:
    train_days: int = 12
    val_days: int = 2
    test_days: int = 2
    blackout_hours: int = 12

    def __post_init__(self):
        if min(self.train_days, self.val_days, self.test_days) <= 0:
            raise ValueError("split day counts must be positive")
        if self.blackout_hours < 0:
            raise ValueError("blackout_hours must be >= 0")

    @property
    def cycle_hours(self) -> int:
        days = (self.train_days + self.val_days + self.test_days) * 24
        return days + 3 * self.blackout_hours


# ------------------------------------------------------------------ truth


def generate_truth_sequence(
    config: StormFieldConfig, spec: GridSpec, hours: int, seed: int
) -> list[RainField]:
    """Hourly truth fields: drifting Gaussian rain cells, cut off to zero."""
    if hours < 1:
        raise ValueError("hours must be >= 1")
    rng = np.random.default_rng([_SALT_TRUTH, seed])
    h, w = spec.shape
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    fields = []
    hour = 0
    while hour < hours:
        life = int(rng.integers(config.storm_lifetime_hours_range[0],
                                config.storm_lifetime_hours_range[1] + 1))
        n = int(rng.integers(config.n_cells_range[0], config.n_cells_range[1] + 1))
        (vx_lo, vx_hi), (vy_lo, vy_hi) = config.advection_velocity_kmph
        vel = np.array([rng.uniform(vy_lo, vy_hi), rng.uniform(vx_lo, vx_hi)])
        vel_cells = vel / spec.cell_size_km
        # Anchor each cell's mid-life position on the grid so storms cross
        # it instead of drifting away during long segments.
        margin = 0.1 * max(h, w)
        anchors = np.column_stack(
            [rng.uniform(-margin, h + margin, n), rng.uniform(-margin, w + margin, n)]
        )
        centers = anchors - vel_cells[None, :] * (life / 2.0)
        sig_major = rng.uniform(*config.cell_sigma_km_range, n) / spec.cell_size_km
        aspect = rng.uniform(0.4, 1.0, n)
        theta = rng.uniform(0.0, math.pi, n)
        mu_log, sigma_log = config.peak_intensity_lognormal
        peaks = rng.lognormal(mu_log, sigma_log, n)
        dry = rng.random(life) < config.dry_probability
        for step in range(life):
            if hour >= hours:
                break
            if dry[step]:
                fields.append(RainField.full(spec, np.zeros((h, w), dtype=np.float32)))
                hour += 1
                continue
            raw = np.zeros((h, w), dtype=np.float64)
            for k in range(n):
                cy = centers[k, 0] + vel_cells[0] * step
                cx = centers[k, 1] + vel_cells[1] * step
                dy = ii - cy
                dx = jj - cx
                u = math.cos(theta[k]) * dx + math.sin(theta[k]) * dy
                v = -math.sin(theta[k]) * dx + math.cos(theta[k]) * dy
                s_maj = sig_major[k]
                s_min = sig_major[k] * aspect[k]
                d2 = (u / s_maj) ** 2 + (v / s_min) ** 2
                raw += peaks[k] * np.exp(-0.5 * d2)
            values = np.where(raw >= config.zero_cutoff_mm, raw, 0.0)
            fields.append(RainField.full(spec, values.astype(np.float32)))
            hour += 1
    return fields


# ----------------------------------------------------------------- sensors


def draw_station_layout(
    spec: GridSpec,
    n_stations: int,
    n_centers: int,
    center_sigma_km: float,
    background_fraction: float,
    seed: int,
) -> list[tuple[int, int]]:
    """Clustered station placement; several stations may share a cell."""
    if n_stations < 1:
        raise ValueError("need at least one station")
    if not 0.0 <= background_fraction <= 1.0:
        raise ValueError("background_fraction must be in [0, 1]")
    rng = np.random.default_rng([_SALT_LAYOUT, seed])
    h, w = spec.shape
    sigma_cells = center_sigma_km / spec.cell_size_km
    centers = np.column_stack([rng.uniform(0, h, n_centers), rng.uniform(0, w, n_centers)])
    cells = []
    for _ in range(n_stations):
        if n_centers == 0 or rng.random() < background_fraction:
            i = int(rng.integers(0, h))
            j = int(rng.integers(0, w))
        else:
            c = centers[int(rng.integers(0, n_centers))]
            i = int(np.clip(round(c[0] + rng.normal(0, sigma_cells)), 0, h - 1))
            j = int(np.clip(round(c[1] + rng.normal(0, sigma_cells)), 0, w - 1))
        cells.append((i, j))
    return cells


def simulate_stations(
    truth_sequence: list[RainField],
    layout: list[tuple[int, int]],
    noise: SensorNoiseConfig,
    seed: int,
) -> list[StationObservation]:
    """Noisy hourly station readings of the truth at fixed layout cells."""
    if not layout:
        raise ValueError("station layout is empty")
    rng = np.random.default_rng([_SALT_STATIONS, seed])
    obs = []
    for idx, cell in enumerate(layout):
        bias = rng.uniform(*noise.station_bias_range)
        station_id = f"s{idx:04d}"
        for t, fld in enumerate(truth_sequence):
            if rng.random() < noise.station_dropout_prob:
                continue
            true_val = float(fld.values[cell])
            if rng.random() < noise.station_outlier_prob:
                value = rng.uniform(*noise.station_outlier_value_range)
            else:
                factor = math.exp(noise.station_multiplicative_sigma * rng.standard_normal())
                value = true_val * bias * factor
            obs.append(
                StationObservation(
                    cell=cell, timestep=t, value=max(value, 0.0), station_id=station_id
                )
            )
    return obs


def simulate_radar(truth: RainField, noise: SensorNoiseConfig, seed: int) -> RainField:
    """Reflectivity round trip with drift, gain errors, clutter, blockage.

    The rain field first drifts by a random per-episode offset (wind between
    the beam altitude and the ground). Corruption then applies in
    reflectivity space, in order: episode-wide gain (systematic bias times
    log-normal jitter), a smooth spatially varying gain surface, optional
    false-echo blobs, beam smoothing, beam blockage. All of it is redrawn per
    call, so no fixed inverse map can undo the errors; the only calibration
    signal is the co-observed stations.
    """
    rng = np.random.default_rng([_SALT_RADAR, seed])
    a, b = noise.radar_mp_a, noise.radar_mp_b
    h, w = truth.spec.shape
    rain = np.asarray(truth.values, dtype=np.float64)
    if noise.radar_displacement_sigma_cells > 0:
        offset = rng.normal(0.0, noise.radar_displacement_sigma_cells, size=2)
        rain = ndimage_shift(rain, offset, order=1, mode="nearest")
        rain = np.maximum(rain, 0.0)
    z = a * np.power(rain, b)
    gain = noise.radar_gain_bias
    if noise.radar_gain_jitter_sigma > 0:
        gain *= math.exp(noise.radar_gain_jitter_sigma * rng.standard_normal())
    z = z * gain
    if noise.radar_gain_field_sigma > 0:
        field = gaussian_filter(
            rng.standard_normal((h, w)), noise.radar_gain_field_scale_cells, mode="wrap"
        )
        field -= field.mean()
        sd = float(field.std())
        if sd > 0:
            # Center and rescale so the surface is pure spatial variation
            # with the requested pointwise log sd; the global level is the
            # jitter knob's job.
            z = z * np.exp((noise.radar_gain_field_sigma / sd) * field)
    if noise.radar_clutter_blobs > 0 and rng.random() < noise.radar_clutter_prob:
        ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
        n_blobs = int(rng.integers(1, noise.radar_clutter_blobs + 1))
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0.0, h), rng.uniform(0.0, w)
            sig = rng.uniform(1.5, 4.0)
            peak = a * rng.uniform(*noise.radar_clutter_intensity_mm) ** b
            z = z + peak * np.exp(
                -0.5 * (((ii - cy) / sig) ** 2 + ((jj - cx) / sig) ** 2)
            )
    if noise.radar_smoothing_sigma_cells > 0:
        z = gaussian_filter(z, noise.radar_smoothing_sigma_cells, mode="nearest")
    if noise.radar_blockage_sectors > 0:
        h, w = truth.spec.shape
        ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
        angle = np.arctan2(ii - (h - 1) / 2.0, jj - (w - 1) / 2.0)
        for _ in range(noise.radar_blockage_sectors):
            center = rng.uniform(-math.pi, math.pi)
            half_width = math.radians(rng.uniform(10.0, 30.0)) / 2.0
            delta = np.abs((angle - center + math.pi) % (2.0 * math.pi) - math.pi)
            z[delta <= half_width] = 0.0
    recovered = np.power(np.maximum(z, 0.0) / a, 1.0 / b)
    return RainField.full(truth.spec, recovered.astype(np.float32))


def grid_stations(
    observations: list[StationObservation], spec: GridSpec, timesteps: int
) -> tuple[np.ndarray, np.ndarray]:
    """Median-grid observations into (T, H, W) values plus a presence mask."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    h, w = spec.shape
    buckets: dict[tuple[int, int, int], list[float]] = {}
    for o in observations:
        if not 0 <= o.timestep < timesteps:
            raise ValueError(f"observation timestep {o.timestep} outside 0..{timesteps - 1}")
        buckets.setdefault((o.timestep, *o.cell), []).append(o.value)
    values = np.zeros((timesteps, h, w), dtype=np.float32)
    presence = np.zeros((timesteps, h, w), dtype=bool)
    for (t, i, j), vals in buckets.items():
        values[t, i, j] = np.median(np.asarray(vals, dtype=np.float64))
        presence[t, i, j] = True
    return values, presence


# ---------------------------------------------------------------- episodes


def build_episode(
    station_values: np.ndarray,
    station_presence: np.ndarray,
    radar: RainField,
    masking_fraction: float,
    holdout_cells: set,
    mode: str,
    seed: int,
    truth: RainField | None = None,
) -> Episode:
    """Assemble one episode with the context/target/holdout protocol.

    Train and val episodes subsample a masking_fraction of non-holdout
    station cells per timestep (floor-rounded count) as context; targets are
    the remaining last-timestep station cells. Test episodes use every
    non-holdout cell as context and the holdout cells as targets.
    """
    if mode not in ("train", "val", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0.0 <= masking_fraction <= 1.0:
        raise ValueError("masking_fraction must be in [0, 1]")
    presence = np.asarray(station_presence, dtype=bool)
    t_steps, h, w = presence.shape
    spec = radar.spec
    if (h, w) != spec.shape:
        raise ValueError("station grids and radar disagree on shape")
    holdout = mask_from_cells(holdout_cells, spec)
    rng = np.random.default_rng([_SALT_EPISODE, seed])
    context = np.zeros_like(presence)
    for t in range(t_steps):
        candidates = np.flatnonzero(presence[t] & ~holdout)
        if mode == "test":
            chosen = candidates
        else:
            k = int(math.floor(masking_fraction * candidates.size))
            chosen = rng.choice(candidates, size=k, replace=False) if k else candidates[:0]
        flat = np.zeros(h * w, dtype=bool)
        flat[chosen] = True
        context[t] = flat.reshape(h, w)
    if mode == "test":
        target = presence[-1] & holdout
    else:
        target = presence[-1] & ~context[-1] & ~holdout
    if not target.any():
        raise ValueError("no target cells remain after masking")
    return Episode(
        spec=spec,
        station_values=station_values,
        station_presence=presence,
        radar=radar,
        context_mask=context,
        target_mask=target,
        holdout_mask=holdout,
        truth=truth,
        holdout_targets=(mode == "test"),
    )


def remask_episode(episode: Episode, masking_fraction: float, seed: int) -> Episode:
    """Redraw the train-mode context/target masks of a stored episode."""
    from .grid_domain import cells_from_mask

    return build_episode(
        episode.station_values,
        episode.station_presence,
        episode.radar,
        masking_fraction,
        cells_from_mask(episode.holdout_mask),
        "train",
        seed,
        truth=episode.truth,
    )


def restrict_context(episode: Episode, allowed_cells) -> Episode:
    """Drop context cells outside ``allowed_cells``; targets are unchanged.

    Used by the station-density sweep: nested allowed sets produce nested
    contexts while the evaluation targets stay fixed.
    """
    allowed = mask_from_cells(set(map(tuple, allowed_cells)), episode.spec)
    new_context = episode.context_mask & allowed[None, :, :]
    return episode.with_context(new_context, episode.target_mask)


# ------------------------------------------------------------------ splits


def split_blocks(hours: int, plan: SplitPlan) -> list[tuple[str, int, int]]:
    """Contiguous (split, start, end_exclusive) blocks over the timeline."""
    if hours < plan.cycle_hours:
        raise ValueError(f"need at least one full cycle ({plan.cycle_hours} h), got {hours}")
    pattern = [
        ("train", plan.train_days * 24),
        (None, plan.blackout_hours),
        ("val", plan.val_days * 24),
        (None, plan.blackout_hours),
        ("test", plan.test_days * 24),
        (None, plan.blackout_hours),
    ]
    blocks = []
    start = 0
    while start < hours:
        for name, length in pattern:
            if start >= hours:
                break
            end = min(start + length, hours)
            if name is not None and end > start:
                blocks.append((name, start, end))
            start = end
    return blocks


def split_timeline(hours: int, plan: SplitPlan) -> dict[str, list[int]]:
    """Hour indices per split; blackout hours belong to no split."""
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for name, start, end in split_blocks(hours, plan):
        out[name].extend(range(start, end))
    return out


def nested_density_masks(
    station_cells, fractions, seed: int
) -> list[frozenset]:
    """Station subsets of sizes round(f*N) nested along ascending f."""
    cells = sorted(set(map(tuple, station_cells)))
    if not cells:
        raise ValueError("no station cells")
    fr = [float(f) for f in fractions]
    if any(not 0.0 < f <= 1.0 for f in fr):
        raise ValueError("fractions must be in (0, 1]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cells))
    masks = []
    for f in fr:
        k = round(f * len(cells))
        masks.append(frozenset(cells[i] for i in order[:k]))
    return masks


# ----------------------------------------------------------------- dataset


@dataclass(frozen=True)
class DatasetConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(height=32, width=32))
    timesteps: int = 4
    hours: int = 420
    storm: StormFieldConfig = field(default_factory=StormFieldConfig)
    noise: SensorNoiseConfig = field(default_factory=SensorNoiseConfig)
    split: SplitPlan = field(default_factory=SplitPlan)
    n_stations: int = 140
    n_station_centers: int = 3
    center_sigma_km: float = 12.0
    station_background_fraction: float = 0.3
    masking_fraction_range: tuple[float, float] = (0.3, 0.5)
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.hours < self.split.cycle_hours:
            raise ValueError("hours must cover at least one split cycle")
        lo, hi = self.masking_fraction_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("masking_fraction_range must be within [0, 1]")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")
        if self.n_stations < 2:
            raise ValueError("need at least two stations")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        kwargs = {}
        if "grid" in d:
            kwargs["grid"] = GridSpec.from_dict(d.pop("grid"))
        for key, sub in (("storm", StormFieldConfig), ("noise", SensorNoiseConfig),
                         ("split", SplitPlan)):
            if key in d:
                raw = dict(d.pop(key))
                # JSON turns tuples into lists; restore hashable shapes.
                fixed = {
                    k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
                    if isinstance(v, list)
                    else v
                    for k, v in raw.items()
                }
                kwargs[key] = sub(**fixed)
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    manifest: dict

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_dict(self.manifest["grid"])

    @property
    def station_cells(self) -> list[tuple[int, int]]:
        return [tuple(c) for c in self.manifest["station_cells"]]

    @property
    def holdout_cells(self) -> set:
        return {tuple(c) for c in self.manifest["holdout_cells"]}

    def episode_dirs(self, split: str) -> list[Path]:
        return [self.root / rel for rel in self.manifest["splits"][split]]


def write_dataset(config: DatasetConfig, out_dir) -> DatasetIndex:
    """Generate and store a complete episode dataset plus its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.grid
    truth_seq = generate_truth_sequence(config.storm, spec, config.hours, config.seed)
    layout = draw_station_layout(
        spec,
        config.n_stations,
        config.n_station_centers,
        config.center_sigma_km,
        config.station_background_fraction,
        config.seed,
    )
    station_cells = sorted(set(layout))
    rng_holdout = np.random.default_rng([_SALT_HOLDOUT, config.seed])
    n_holdout = round(config.holdout_fraction * len(station_cells))
    chosen = rng_holdout.choice(len(station_cells), size=n_holdout, replace=False)
    holdout_cells = {station_cells[i] for i in sorted(chosen)}
    observations = simulate_stations(truth_seq, layout, config.noise, config.seed)
    values, presence = grid_stations(observations, spec, config.hours)

    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    skipped = 0
    lo, hi = config.masking_fraction_range
    for name, start, end in split_blocks(config.hours, config.split):
        for last in range(start + config.timesteps - 1, end):
            window = slice(last - config.timesteps + 1, last + 1)
            ep_seed = config.seed * 100003 + last
            r = float(np.random.default_rng([_SALT_EPISODE, ep_seed, 1]).uniform(lo, hi))
            radar = simulate_radar(truth_seq[last], config.noise, seed=ep_seed)
            try:
                ep = build_episode(
                    values[window],
                    presence[window],
                    radar,
                    r,
                    holdout_cells,
                    name,
                    seed=ep_seed,
                    truth=truth_seq[last],
                )
            except ValueError:
                skipped += 1
                continue
            rel = f"{name}/ep_{last:05d}"
            save_episode(
                out / rel,
                ep,
                extra_manifest={"split": name, "end_hour": last, "masking_fraction": r},
            )
            splits[name].append(rel)

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "grid": spec.to_dict(),
        "timesteps": config.timesteps,
        "hours": config.hours,
        "seed": config.seed,
        "station_cells": [list(c) for c in station_cells],
        "holdout_cells": sorted([list(c) for c in holdout_cells]),
        "splits": splits,
        "skipped_episodes": skipped,
        "config": config.to_dict(),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (out / "manifest.json").write_text(text)
    # Round-trip through JSON so the returned manifest equals a later read.
    return DatasetIndex(root=out, manifest=json.loads(text))


def ensure_dataset(config: DatasetConfig, root) -> DatasetIndex:
    """Materialize a dataset once; reuse it when the stored config matches."""
    root = Path(root)
    if (root / "manifest.json").exists():
        index = read_dataset(root)
        canonical = json.loads(json.dumps(config.to_dict()))
        if index.manifest["config"] == canonical:
            return index
        raise ValueError(f"dataset at {root} was built from a different config")
    return write_dataset(config, root)


def read_dataset(root) -> DatasetIndex:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format: {manifest.get('format_version')!r}")
    return DatasetIndex(root=root, manifest=manifest)


def load_split(index: DatasetIndex, split: str) -> list[Episode]:
    return [load_episode(d) for d in index.episode_dirs(split)]
