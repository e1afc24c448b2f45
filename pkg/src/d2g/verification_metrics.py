"""Forecast verification metrics for gridded rainfall.

Thresholded categorical scores (CSI, FBI), neighborhood fraction skill
(FSS), and probabilistic scores (closed-form CRPS for Gamma, zero-inflated
Gamma, and Gaussian predictions) with sparse-target masking.

Conventions, fixed here and relied on by tests:

- An "event" is value >= threshold, on both prediction and target.
- Undefined scores (empty denominator) are reported as None and excluded
  from averages; dry periods are not scored as failures.
- FSS windows are n x n boxes with row/column offsets
  [-(n // 2), ..., n - 1 - n // 2]; each window is normalized by its count
  of valid target cells, and both fraction fields use only valid cells, so
  the score is symmetric in (pred, target). Cells whose window holds no
  valid cell are skipped.
- Aggregation over many fields pools contingency counts and FSS
  numerator/denominator sums rather than averaging per-field scores.
- A plain mean field (a deterministic prediction) is scored with the
  point-mass CRPS |mean - y|.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, gammainc, ndtr

from .grid_domain import PARAM_FLOOR, ZIGParams, zig_mean_variance

__all__ = [
    "MetricConfig",
    "ThresholdCounts",
    "GaussianPrediction",
    "MetricReport",
    "MetricAccumulator",
    "threshold_counts",
    "csi",
    "fbi",
    "csi_from_counts",
    "fbi_from_counts",
    "fss",
    "crps_gamma",
    "crps_zig",
    "crps_gaussian",
    "evaluate",
]

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MetricConfig:
    thresholds_mm: tuple[float, ...] = (0.2, 1.0, 2.0, 5.0, 10.0)
    fss_neighborhoods_cells: tuple[int, ...] = (2, 10, 20)
    rain_event_threshold_mm: float = 0.2

    def __post_init__(self):
        thr = tuple(float(t) for t in self.thresholds_mm)
        if not thr or any(t <= 0 for t in thr) or list(thr) != sorted(thr):
            raise ValueError("thresholds must be positive and ascending")
        if len(set(thr)) != len(thr):
            raise ValueError("thresholds must be distinct")
        nb = tuple(int(n) for n in self.fss_neighborhoods_cells)
        if not nb or any(n <= 0 for n in nb):
            raise ValueError("neighborhoods must be positive")
        if self.rain_event_threshold_mm <= 0:
            raise ValueError("rain_event_threshold_mm must be positive")
        object.__setattr__(self, "thresholds_mm", thr)
        object.__setattr__(self, "fss_neighborhoods_cells", nb)


@dataclass(frozen=True)
class ThresholdCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ThresholdCounts") -> "ThresholdCounts":
        return ThresholdCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class GaussianPrediction:
    """Evaluation-side container for the Gaussian-head ablation."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), PARAM_FLOOR)
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma shapes differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("non-finite Gaussian parameters")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def _as_field(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _as_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ValueError(f"valid mask shape {m.shape} != field shape {shape}")
    return m


def threshold_counts(pred, target, valid_mask, threshold: float) -> ThresholdCounts:
    """Contingency counts over valid cells at one event threshold."""
    pred = _as_field(pred, "pred")
    target = _as_field(target, "target")
    valid = _as_mask(valid_mask, pred.shape)
    if target.shape != pred.shape:
        raise ValueError("pred and target shapes differ")
    if not valid.any():
        raise ValueError("no evaluable cells")
    p = pred[valid] >= threshold
    o = target[valid] >= threshold
    return ThresholdCounts(
        tp=int(np.sum(p & o)),
        fp=int(np.sum(p & ~o)),
        fn=int(np.sum(~p & o)),
        tn=int(np.sum(~p & ~o)),
    )


def csi_from_counts(c: ThresholdCounts) -> float | None:
    denom = c.tp + c.fp + c.fn
    return None if denom == 0 else c.tp / denom


def fbi_from_counts(c: ThresholdCounts) -> float | None:
    denom = c.tp + c.fn
    return None if denom == 0 else (c.tp + c.fp) / denom


def csi(pred, target, valid_mask, threshold: float) -> float | None:
    return csi_from_counts(threshold_counts(pred, target, valid_mask, threshold))


def fbi(pred, target, valid_mask, threshold: float) -> float | None:
    return fbi_from_counts(threshold_counts(pred, target, valid_mask, threshold))


def _box_sum(arr: np.ndarray, n: int) -> np.ndarray:
    # Summed-area table; windows clipped at the borders. Offsets are
    # [-(n//2), n-1-n//2] so even sizes lean one cell up/left.
    h, w = arr.shape
    lo = n // 2
    hi = n - 1 - lo
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(arr, axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])
    r0 = np.clip(np.arange(h) - lo, 0, h)
    r1 = np.clip(np.arange(h) + hi + 1, 0, h)
    c0 = np.clip(np.arange(w) - lo, 0, w)
    c1 = np.clip(np.arange(w) + hi + 1, 0, w)
    return (
        s[np.ix_(r1, c1)] - s[np.ix_(r0, c1)] - s[np.ix_(r1, c0)] + s[np.ix_(r0, c0)]
    )


def _fss_components(pred, target, valid_mask, threshold, neighborhood):
    pred = _as_field(pred, "pred")
    target = _as_field(target, "target")
    valid = _as_mask(valid_mask, pred.shape)
    h, w = pred.shape
    n = int(neighborhood)
    if n > h or n > w:
        raise ValueError(f"neighborhood {n} exceeds grid {h}x{w}")
    if not valid.any():
        raise ValueError("no evaluable cells")
    p_event = ((pred >= threshold) & valid).astype(np.float64)
    o_event = ((target >= threshold) & valid).astype(np.float64)
    n_valid = _box_sum(valid.astype(np.float64), n)
    scored = n_valid >= 1
    f_frac = np.divide(_box_sum(p_event, n), n_valid, where=scored, out=np.zeros_like(n_valid))
    o_frac = np.divide(_box_sum(o_event, n), n_valid, where=scored, out=np.zeros_like(n_valid))
    num = float(np.sum((f_frac[scored] - o_frac[scored]) ** 2))
    den = float(np.sum(f_frac[scored] ** 2) + np.sum(o_frac[scored] ** 2))
    return num, den


def fss(pred, target, valid_mask, threshold: float, neighborhood: int) -> float | None:
    num, den = _fss_components(pred, target, valid_mask, threshold, neighborhood)
    return None if den == 0.0 else 1.0 - num / den


def _validate_gamma(alpha, beta):
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
        raise ValueError("non-finite Gamma parameters")
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ValueError("Gamma parameters must be positive")
    return alpha, beta


def _validate_observed(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValueError("observed values must be finite and >= 0")
    return y


def crps_gamma(alpha, beta, y):
    """Closed-form CRPS of a rate-parameterized Gamma prediction.

    crps = y(2F(y) - 1) - (a/b)(2F_{a+1}(y) - 1) - (a/(b pi)) B(a+1/2, 1/2)
    with F the regularized lower incomplete gamma at rate b.
    """
    alpha, beta = _validate_gamma(alpha, beta)
    y = _validate_observed(y)
    by = beta * y
    term1 = y * (2.0 * gammainc(alpha, by) - 1.0)
    term2 = (alpha / beta) * (2.0 * gammainc(alpha + 1.0, by) - 1.0)
    term3 = (alpha / (beta * math.pi)) * np.exp(betaln(alpha + 0.5, 0.5))
    # Analytically > 0; clamp guards float round-off at extreme parameters.
    return np.maximum(term1 - term2 - term3, 0.0)


def crps_zig(params: ZIGParams, observed, rain_threshold: float = 0.2):
    """Binarized zero-inflated CRPS.

    Observed <= rain_threshold counts as dry: score = p_nonzero * crps_gamma(0).
    Observed above it: score = p_zero * y + p_nonzero * crps_gamma(y),
    with p_nonzero the deterministic rain indicator of the prediction.
    """
    y = _validate_observed(observed)
    if y.shape != params.pi0.shape:
        raise ValueError("observed shape differs from parameter fields")
    p_nz = params.rain_indicator
    dry = y <= rain_threshold
    out = np.where(
        dry,
        p_nz * crps_gamma(params.alpha, params.beta, np.zeros_like(y)),
        (1.0 - p_nz) * y + p_nz * crps_gamma(params.alpha, params.beta, y),
    )
    return out


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of a Gaussian prediction."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=np.float64)
    z = (y - mu) / sigma
    phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * phi - 1.0 / math.sqrt(math.pi))


def _fmt_threshold(t: float) -> str:
    return f"{float(t):g}"


@dataclass(frozen=True)
class MetricReport:
    """Aggregated scores plus the cell/field counts behind them."""

    csi: dict
    fbi: dict
    fss: dict
    crps: float
    mae: float
    mse: float
    n_cells: int
    n_fields: int
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for t, v in self.csi.items():
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"CSI out of range at threshold {t}: {v}")
        for t, v in self.fbi.items():
            if v is not None and v < 0.0:
                raise ValueError(f"FBI negative at threshold {t}: {v}")
        for k, v in self.fss.items():
            if v is not None and not (-1e-9 <= v <= 1.0 + 1e-9):
                raise ValueError(f"FSS out of range at {k}: {v}")
        for name in ("crps", "mae", "mse"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} negative")

    def averages(self) -> dict:
        """Per-family means over defined entries only."""

        def mean_defined(values):
            vals = [v for v in values if v is not None]
            return None if not vals else float(np.mean(vals))

        return {
            "csi_mean": mean_defined(self.csi.values()),
            "fbi_mean": mean_defined(self.fbi.values()),
            "fss_mean": mean_defined(self.fss.values()),
        }

    def to_dict(self) -> dict:
        fss_nested: dict = {}
        for (t, n), v in self.fss.items():
            fss_nested.setdefault(_fmt_threshold(t), {})[str(int(n))] = v
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "n_cells": self.n_cells,
            "n_fields": self.n_fields,
            "crps": self.crps,
            "mae": self.mae,
            "mse": self.mse,
            "csi": {_fmt_threshold(t): v for t, v in self.csi.items()},
            "fbi": {_fmt_threshold(t): v for t, v in self.fbi.items()},
            "fss": fss_nested,
            "counts": {
                _fmt_threshold(t): {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
                for t, c in self.counts.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema: {d.get('schema_version')!r}")
        fss_flat = {
            (float(t), int(n)): v
            for t, per_n in d["fss"].items()
            for n, v in per_n.items()
        }
        counts = {
            float(t): ThresholdCounts(**{k: int(v) for k, v in c.items()})
            for t, c in d.get("counts", {}).items()
        }
        return cls(
            csi={float(t): v for t, v in d["csi"].items()},
            fbi={float(t): v for t, v in d["fbi"].items()},
            fss=fss_flat,
            crps=d["crps"],
            mae=d["mae"],
            mse=d["mse"],
            n_cells=d["n_cells"],
            n_fields=d["n_fields"],
            counts=counts,
        )


def _predictive_mean(pred) -> np.ndarray:
    if isinstance(pred, ZIGParams):
        mean, _ = zig_mean_variance(pred)
        return mean
    if isinstance(pred, GaussianPrediction):
        return pred.mu
    return _as_field(pred, "pred")


def _cell_crps(pred, observed, rain_threshold) -> np.ndarray:
    if isinstance(pred, ZIGParams):
        return crps_zig(pred, observed, rain_threshold)
    if isinstance(pred, GaussianPrediction):
        return crps_gaussian(pred.mu, pred.sigma, observed)
    return np.abs(_as_field(pred, "pred") - np.asarray(observed, dtype=np.float64))


class MetricAccumulator:
    """Pools counts and error sums over many (pred, target) fields."""

    def __init__(self, config: MetricConfig | None = None):
        self.config = config or MetricConfig()
        self._counts = {t: ThresholdCounts() for t in self.config.thresholds_mm}
        self._fss_num = {
            (t, n): 0.0
            for t in self.config.thresholds_mm
            for n in self.config.fss_neighborhoods_cells
        }
        self._fss_den = dict.fromkeys(self._fss_num, 0.0)
        self._crps_sum = 0.0
        self._abs_sum = 0.0
        self._sq_sum = 0.0
        self._n_cells = 0
        self._n_fields = 0

    def add(self, pred, target, valid_mask) -> None:
        target = _as_field(target, "target")
        valid = _as_mask(valid_mask, target.shape)
        if not valid.any():
            raise ValueError("no evaluable cells")
        if not np.all(np.isfinite(target[valid])):
            raise ValueError("non-finite target values in valid cells")
        # Invalid cells may carry sentinels; zero them so vectorized scoring
        # never touches NaN (every score below reads valid cells only).
        target = np.where(valid, target, 0.0)
        mean = _predictive_mean(pred)
        if mean.shape != target.shape:
            raise ValueError("pred and target shapes differ")
        for t in self.config.thresholds_mm:
            self._counts[t] = self._counts[t] + threshold_counts(mean, target, valid, t)
            for n in self.config.fss_neighborhoods_cells:
                num, den = _fss_components(mean, target, valid, t, n)
                self._fss_num[(t, n)] += num
                self._fss_den[(t, n)] += den
        err = mean[valid] - target[valid]
        cell_scores = _cell_crps(pred, target, self.config.rain_event_threshold_mm)
        self._crps_sum += float(np.sum(cell_scores[valid]))
        self._abs_sum += float(np.sum(np.abs(err)))
        self._sq_sum += float(np.sum(err**2))
        self._n_cells += int(valid.sum())
        self._n_fields += 1

    def report(self) -> MetricReport:
        if self._n_cells == 0:
            raise ValueError("nothing accumulated")
        fss_scores = {
            key: (None if self._fss_den[key] == 0.0 else 1.0 - self._fss_num[key] / self._fss_den[key])
            for key in self._fss_num
        }
        return MetricReport(
            csi={t: csi_from_counts(c) for t, c in self._counts.items()},
            fbi={t: fbi_from_counts(c) for t, c in self._counts.items()},
            fss=fss_scores,
            crps=self._crps_sum / self._n_cells,
            mae=self._abs_sum / self._n_cells,
            mse=self._sq_sum / self._n_cells,
            n_cells=self._n_cells,
            n_fields=self._n_fields,
            counts=dict(self._counts),
        )


def evaluate(pred, target, valid_mask, config: MetricConfig | None = None) -> MetricReport:
    """Score one prediction field against one sparse target field."""
    acc = MetricAccumulator(config)
    acc.add(pred, target, valid_mask)
    return acc.report()
