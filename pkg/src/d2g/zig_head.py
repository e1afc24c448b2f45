"""Output-distribution log-likelihoods and the target-restricted loss.

The primary distribution is a zero-inflated Gamma: a point mass pi0 at
exactly zero and (1 - pi0) times a rate-parameterized Gamma density on the
positive reals. Exact zeros select the point-mass branch; any measurement
threshold applies to metrics, never to the likelihood.

Ablation distributions: a plain Gamma, which cannot score y = 0 and instead
maps exact zeros to a small positive floor, and a Gaussian.

The loss is the mean (not sum) negative log-likelihood over target cells, so
its scale does not depend on how many targets an episode happens to have.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .grid_domain import Episode

__all__ = [
    "GAMMA_ZERO_FLOOR",
    "TargetSelection",
    "zig_log_likelihood",
    "gamma_log_likelihood",
    "gaussian_log_likelihood",
    "log_likelihood",
    "nll_loss",
]

# Plain-Gamma ablation: exact-zero targets are scored at this rainfall value.
GAMMA_ZERO_FLOOR = 0.01

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TargetSelection:
    """Loss/eval cells at the last timestep and their observed values.

    ``includes_inputs`` marks the deliberately leaky variant where the last
    timestep's context cells are scored too; the disjointness check is
    skipped only then.
    """

    grid_shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    y_true: np.ndarray
    includes_inputs: bool = field(default=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        y = np.asarray(self.y_true, dtype=np.float64)
        if not rows.shape == cols.shape == y.shape or rows.ndim != 1:
            raise ValueError("rows, cols, y_true must be equal-length 1-D arrays")
        h, w = self.grid_shape
        if rows.size and (rows.min() < 0 or rows.max() >= h
                          or cols.min() < 0 or cols.max() >= w):
            raise ValueError("target cell out of grid bounds")
        if y.size and (not np.all(np.isfinite(y)) or np.any(y < 0)):
            raise ValueError("target values must be finite and >= 0")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "y_true", y)

    @property
    def count(self) -> int:
        return int(self.rows.size)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid_shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def cells(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in zip(self.rows, self.cols)}

    @classmethod
    def from_episode(cls, episode: Episode, target_inputs: bool = False) -> "TargetSelection":
        """Target cells and their station values at the last timestep.

        ``target_inputs`` additionally scores the last timestep's context
        cells (model inputs), the mechanism behind the degraded variant.
        """
        tm = episode.target_mask.copy()
        last_context = episode.context_mask[-1]
        if target_inputs:
            tm |= last_context
        present = episode.station_presence[-1]
        if np.any(tm & ~present):
            raise ValueError("target cells must carry station data at the last timestep")
        if not target_inputs:
            if np.any(tm & last_context):
                raise ValueError("target cells overlap last-timestep context")
            if not episode.holdout_targets and np.any(tm & episode.holdout_mask):
                raise ValueError("target cells overlap holdout cells")
        rows, cols = np.nonzero(tm)
        return cls(
            grid_shape=episode.spec.shape,
            rows=rows,
            cols=cols,
            y_true=episode.station_values[-1][rows, cols],
            includes_inputs=target_inputs,
        )


def _check_y(y: torch.Tensor) -> None:
    if torch.any(y < 0):
        raise ValueError("rainfall values must be >= 0")


def zig_log_likelihood(y: torch.Tensor, pi0: torch.Tensor, alpha: torch.Tensor,
                       beta: torch.Tensor) -> torch.Tensor:
    """Elementwise log-density of the zero-inflated Gamma.

    y = 0 scores log(pi0); y > 0 scores log(1 - pi0) plus the Gamma
    log-density with shape alpha and rate beta.
    """
    _check_y(y)
    dry = y == 0
    # keep the unused branch NaN-free so autodiff stays clean
    y_safe = torch.where(dry, torch.ones_like(y), y)
    wet = (torch.log1p(-pi0) + alpha * torch.log(beta) - torch.lgamma(alpha)
           + (alpha - 1.0) * torch.log(y_safe) - beta * y_safe)
    return torch.where(dry, torch.log(pi0), wet)


def gamma_log_likelihood(y: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor,
                         zero_floor: float = GAMMA_ZERO_FLOOR) -> torch.Tensor:
    """Gamma log-density; exact zeros are scored at ``zero_floor`` mm.

    Only exact zeros are remapped: small positive values stand as reported.
    """
    _check_y(y)
    y_pos = torch.where(y == 0, torch.full_like(y, zero_floor), y)
    return (alpha * torch.log(beta) - torch.lgamma(alpha)
            + (alpha - 1.0) * torch.log(y_pos) - beta * y_pos)


def gaussian_log_likelihood(y: torch.Tensor, mu: torch.Tensor,
                            sigma: torch.Tensor) -> torch.Tensor:
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (y - mu) / sigma
    return -0.5 * z**2 - torch.log(sigma) - 0.5 * _LOG_2PI


def log_likelihood(y: torch.Tensor, params: dict[str, torch.Tensor],
                   distribution: str = "zig") -> torch.Tensor:
    """Dispatch on the head's output channels."""
    if distribution == "zig":
        return zig_log_likelihood(y, params["pi0"], params["alpha"], params["beta"])
    if distribution == "gamma":
        return gamma_log_likelihood(y, params["alpha"], params["beta"])
    if distribution == "gaussian":
        return gaussian_log_likelihood(y, params["mu"], params["sigma"])
    raise ValueError(f"unknown distribution {distribution!r}")


def nll_loss(params: dict[str, torch.Tensor], y: torch.Tensor, mask: torch.Tensor,
             distribution: str = "zig") -> torch.Tensor:
    """Mean negative log-likelihood over masked cells.

    ``y`` and every parameter field share the mask's shape; an empty mask is
    an error, the caller must skip such episodes.
    """
    if mask.dtype != torch.bool:
        raise ValueError("mask must be boolean")
    if not bool(mask.any()):
        raise ValueError("empty target set: no cells to score")
    sel = {k: v[mask] for k, v in params.items()}
    return -log_likelihood(y[mask], sel, distribution).mean()
