"""Optimization loop, EMA, checkpointing, evaluation, and density sweeps.

Training draws episode batches with replacement from the train split and, by
default, re-randomizes each episode's context/target masking per step as
augmentation. Validation runs on the EMA weights over the val split's stored
masks; the best-by-validation-loss checkpoint is kept. Everything is seeded,
single-device, and bit-for-bit reproducible.

A checkpoint is a single self-describing file: config echoes, raw and EMA
weights, optimizer state, step, and validation loss. Evaluation always reads
the EMA weights unless told otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .baselines_ablations import AblationSpec, idw_densify
from .grid_domain import PI0_MIN, Episode, ZIGParams, zig_mean_variance
from .model import ModelConfig, build_model
from .synthetic_episodes import (
    DatasetConfig,
    DatasetIndex,
    load_split,
    nested_density_masks,
    remask_episode,
    restrict_context,
)
from .verification_metrics import (
    GaussianPrediction,
    MetricAccumulator,
    MetricConfig,
    MetricReport,
)
from .zig_head import TargetSelection, nll_loss

__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "TrainConfig",
    "TrainResult",
    "collate_episodes",
    "EMA",
    "train",
    "ensure_trained",
    "default_cache_root",
    "load_checkpoint",
    "model_from_checkpoint",
    "evaluate_checkpoint",
    "evaluate_idw",
    "density_sweep",
    "uncertainty_map",
    "summarize_reports",
]

CHECKPOINT_FORMAT_VERSION = 1
_EVAL_CHUNK = 16


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 50_000
    batch_size: int = 32
    lr_init: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    ema_decay: float = 0.999
    val_every_steps: int = 1000
    seed: int = 0
    grad_clip_norm: float = 1.0
    remask_context: bool = True

    def __post_init__(self):
        if min(self.max_steps, self.batch_size, self.val_every_steps) < 1:
            raise ValueError("max_steps, batch_size, val_every_steps must be >= 1")
        if self.lr_init <= 0 or self.weight_decay < 0 or self.grad_clip_norm <= 0:
            raise ValueError("lr_init and grad_clip_norm must be positive, "
                             "weight_decay non-negative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        object.__setattr__(self, "betas", tuple(self.betas))

    @staticmethod
    def desk(seed: int = 0, max_steps: int = 2000) -> "TrainConfig":
        """Small-compute profile: short run, small batch, frequent validation."""
        return TrainConfig(max_steps=max_steps, batch_size=16,
                           val_every_steps=max(1, max_steps // 8), seed=seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(d["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    best_val_loss: float
    best_step: int
    steps: int


def collate_episodes(episodes: Sequence[Episode],
                     target_inputs: bool = False) -> dict[str, torch.Tensor]:
    """Stack episodes into model input tensors plus loss targets.

    Building the TargetSelection here re-asserts the target/context/holdout
    disjointness invariants on every batch.
    """
    if not episodes:
        raise ValueError("empty episode batch")
    selections = [TargetSelection.from_episode(ep, target_inputs) for ep in episodes]
    station_values = torch.from_numpy(
        np.stack([ep.station_values for ep in episodes]))
    station_context = torch.from_numpy(
        np.stack([ep.context_mask for ep in episodes]).astype(np.float32))
    radar = torch.from_numpy(np.stack(
        [np.where(ep.radar.valid_mask, ep.radar.values, 0.0).astype(np.float32)
         for ep in episodes]))
    radar_valid = torch.from_numpy(
        np.stack([ep.radar.valid_mask for ep in episodes]).astype(np.float32))
    y = torch.from_numpy(np.stack(
        [ep.station_values[-1] for ep in episodes]).astype(np.float32))
    target_mask = torch.from_numpy(np.stack([sel.mask() for sel in selections]))
    return {
        "station_values": station_values,
        "station_context": station_context,
        "radar_values": radar,
        "radar_valid": radar_valid,
        "y": y,
        "target_mask": target_mask,
    }


class EMA:
    """Exponential moving average over a module's state dict."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone()
                       for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.state_dict().items():
            s = self.shadow[k]
            if s.dtype.is_floating_point:
                s.mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)
            else:
                s.copy_(v)

    def state_dict(self) -> dict:
        return self.shadow


def _forward_loss(model: nn.Module, batch: dict, distribution: str) -> torch.Tensor:
    params = model(batch["station_values"], batch["station_context"],
                   batch["radar_values"], batch["radar_valid"])
    return nll_loss(params, batch["y"], batch["target_mask"], distribution)


def _validation_loss(eval_model: nn.Module, episodes: Sequence[Episode],
                     distribution: str, target_inputs: bool) -> float:
    eval_model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for i in range(0, len(episodes), _EVAL_CHUNK):
            chunk = episodes[i:i + _EVAL_CHUNK]
            batch = collate_episodes(chunk, target_inputs)
            n = int(batch["target_mask"].sum().item())
            loss = _forward_loss(eval_model, batch, distribution)
            total += loss.item() * n
            count += n
    return total / count


def train(model_config: ModelConfig, dataset: DatasetIndex,
          train_config: TrainConfig, out_dir: Union[str, Path],
          ablation: str = "full") -> TrainResult:
    """Run the optimization loop; returns paths to the best checkpoint and log.

    ``ablation`` only supplies the target-selection flag and the checkpoint
    label; the model config must already carry the structural deltas.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target_inputs = AblationSpec(ablation).target_inputs

    torch.manual_seed(train_config.seed)
    model = build_model(model_config)
    model.train()
    eval_model = build_model(model_config)

    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr_init,
                                  weight_decay=train_config.weight_decay,
                                  betas=train_config.betas)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=train_config.max_steps, eta_min=0.0)
    ema = EMA(model, train_config.ema_decay)

    train_eps = load_split(dataset, "train")
    val_eps = load_split(dataset, "val")
    if not train_eps or not val_eps:
        raise ValueError("dataset must provide non-empty train and val splits")
    lo, hi = DatasetConfig.from_dict(
        dataset.manifest["config"]).masking_fraction_range

    batch_rng = np.random.default_rng([977, train_config.seed])
    ckpt_path = out / "checkpoint.pt"
    log_path = out / "train_log.jsonl"
    best_val = math.inf
    best_step = 0

    def save_checkpoint(step: int, val_loss: float) -> None:
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "model_config": model_config.to_dict(),
                "train_config": train_config.to_dict(),
                "ablation": ablation,
                "step": step,
                "val_loss": val_loss,
                "model_state": model.state_dict(),
                "ema_state": ema.state_dict(),
                "optimizer_state": optimizer.state_dict(),
            },
            ckpt_path,
        )

    with open(log_path, "w") as log:
        for step in range(1, train_config.max_steps + 1):
            idx = batch_rng.integers(0, len(train_eps), train_config.batch_size)
            batch_eps = []
            for i in idx:
                ep = train_eps[int(i)]
                if train_config.remask_context:
                    r = float(batch_rng.uniform(lo, hi))
                    remask_seed = int(batch_rng.integers(2**31))
                    try:
                        ep = remask_episode(ep, r, remask_seed)
                    except ValueError:
                        pass  # redraw left no targets; keep the stored masks
                batch_eps.append(ep)
            batch = collate_episodes(batch_eps, target_inputs)

            lr_now = optimizer.param_groups[0]["lr"]
            loss = _forward_loss(model, batch, model_config.distribution)
            if not torch.isfinite(loss):
                dump = out / f"diagnostic_step{step}.pt"
                torch.save({"step": step, "loss": loss.detach(), "batch": batch,
                            "episode_indices": idx.tolist()}, dump)
                raise RuntimeError(
                    f"non-finite loss at step {step}; offending batch dumped to {dump}"
                )
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip_norm)
            optimizer.step()
            scheduler.step()
            ema.update(model)

            entry = {"step": step, "lr": lr_now, "train_loss": loss.item()}
            if step % train_config.val_every_steps == 0 or step == train_config.max_steps:
                eval_model.load_state_dict(ema.state_dict())
                val_loss = _validation_loss(eval_model, val_eps,
                                            model_config.distribution, target_inputs)
                if not math.isfinite(val_loss):
                    raise RuntimeError(f"non-finite validation loss at step {step}")
                entry["val_loss"] = val_loss
                if val_loss < best_val:
                    best_val = val_loss
                    best_step = step
                    save_checkpoint(step, val_loss)
                model.train()
            log.write(json.dumps(entry) + "\n")

    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       best_val_loss=best_val, best_step=best_step,
                       steps=train_config.max_steps)


def default_cache_root() -> Path:
    env = os.environ.get("D2G_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "d2g"


def _run_key(model_config: ModelConfig, train_config: TrainConfig,
             ablation: str, dataset: DatasetIndex) -> str:
    payload = json.dumps(
        {
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "ablation": ablation,
            "dataset": dataset.manifest["config"],
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def ensure_trained(model_config: ModelConfig, dataset: DatasetIndex,
                   train_config: TrainConfig, ablation: str = "full",
                   cache_root: Optional[Union[str, Path]] = None) -> Path:
    """Train once per unique (configs, ablation, dataset) tuple.

    Training is deterministic, so a finished run keyed by its full
    configuration can be reused verbatim. Returns the checkpoint path.
    """
    root = Path(cache_root) if cache_root is not None else default_cache_root()
    run_dir = root / _run_key(model_config, train_config, ablation, dataset)
    ckpt = run_dir / "checkpoint.pt"
    done = run_dir / "DONE"
    if ckpt.exists() and done.exists():
        return ckpt
    result = train(model_config, dataset, train_config, run_dir, ablation=ablation)
    done.write_text(json.dumps({"best_val_loss": result.best_val_loss,
                                "best_step": result.best_step,
                                "ablation": ablation}))
    return result.checkpoint_path


def load_checkpoint(path: Union[str, Path]) -> dict:
    ckpt = torch.load(path, weights_only=True)
    if ckpt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {ckpt.get('format_version')}")
    return ckpt


def model_from_checkpoint(ckpt: Union[str, Path, dict],
                          use_ema: bool = True) -> tuple[nn.Module, dict]:
    if not isinstance(ckpt, dict):
        ckpt = load_checkpoint(ckpt)
    model = build_model(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["ema_state" if use_ema else "model_state"])
    model.eval()
    return model, ckpt


def _predictions_from_params(params: dict[str, torch.Tensor], distribution: str,
                             index: int):
    """Per-episode metric prediction object from a batched forward."""
    take = {k: v[index].detach().numpy().astype(np.float64) for k, v in params.items()}
    if distribution == "zig":
        return ZIGParams(pi0=take["pi0"], alpha=take["alpha"], beta=take["beta"])
    if distribution == "gamma":
        # no zero-inflation channel: the distribution is all-rain, which the
        # metric layer represents as a clamped-minimal dry mass
        full = np.full_like(take["alpha"], PI0_MIN)
        return ZIGParams(pi0=full, alpha=take["alpha"], beta=take["beta"])
    return GaussianPrediction(mu=take["mu"], sigma=take["sigma"])


def _iter_eval_predictions(model: nn.Module, distribution: str,
                           episodes: Sequence[Episode]):
    with torch.no_grad():
        for i in range(0, len(episodes), _EVAL_CHUNK):
            chunk = episodes[i:i + _EVAL_CHUNK]
            batch = collate_episodes(chunk)
            params = model(batch["station_values"], batch["station_context"],
                           batch["radar_values"], batch["radar_valid"])
            for j, ep in enumerate(chunk):
                yield ep, _predictions_from_params(params, distribution, j)


def _check_test_targets(episode: Episode) -> None:
    if not episode.holdout_targets:
        raise AssertionError("test episode without holdout-target flag")
    if np.any(episode.target_mask & ~episode.holdout_mask):
        raise AssertionError("test targets must be holdout cells only")


def evaluate_checkpoint(ckpt: Union[str, Path, dict], dataset: DatasetIndex,
                        split: str = "test",
                        metric_config: Optional[MetricConfig] = None,
                        allowed_context: Optional[Iterable[tuple[int, int]]] = None,
                        use_ema: bool = True) -> MetricReport:
    """MetricReport for a stored model over one dataset split.

    Targets are scored against the held-out station observations at the last
    timestep. ``allowed_context`` restricts the station context (density
    sweep); targets are untouched.
    """
    model, ckpt_dict = model_from_checkpoint(ckpt, use_ema=use_ema)
    distribution = ckpt_dict["model_config"]["distribution"]
    episodes = load_split(dataset, split)
    if allowed_context is not None:
        episodes = [restrict_context(ep, allowed_context) for ep in episodes]
    acc = MetricAccumulator(metric_config or MetricConfig())
    for ep, pred in _iter_eval_predictions(model, distribution, episodes):
        if split == "test":
            _check_test_targets(ep)
        acc.add(pred, ep.station_values[-1].astype(np.float64), ep.target_mask)
    return acc.report()


def evaluate_idw(dataset: DatasetIndex, split: str = "test",
                 metric_config: Optional[MetricConfig] = None, power: float = 2.0,
                 max_radius: Optional[float] = None,
                 allowed_context: Optional[Iterable[tuple[int, int]]] = None) -> MetricReport:
    """Same evaluation protocol for the classical interpolation baseline.

    IDW sees the last timestep's context stations only.
    """
    episodes = load_split(dataset, split)
    if allowed_context is not None:
        episodes = [restrict_context(ep, allowed_context) for ep in episodes]
    acc = MetricAccumulator(metric_config or MetricConfig())
    for ep in episodes:
        mask = ep.context_mask[-1]
        if not mask.any():
            continue  # nothing to interpolate from
        field = idw_densify(ep.station_values[-1].astype(np.float64), mask,
                            ep.spec, power=power, max_radius=max_radius)
        acc.add(field.values, ep.station_values[-1].astype(np.float64),
                ep.target_mask)
    return acc.report()


def density_sweep(ckpt: Union[str, Path, dict], dataset: DatasetIndex,
                  fractions: Sequence[float], split: str = "test",
                  metric_config: Optional[MetricConfig] = None,
                  seed: int = 0) -> dict[float, MetricReport]:
    """Evaluate one checkpoint under nested station-context subsets."""
    masks = nested_density_masks(dataset.station_cells, fractions, seed)
    return {
        float(f): evaluate_checkpoint(ckpt, dataset, split=split,
                                      metric_config=metric_config,
                                      allowed_context=mask)
        for f, mask in zip(fractions, masks)
    }


def uncertainty_map(ckpt: Union[str, Path, dict], dataset: DatasetIndex,
                    split: str = "test") -> np.ndarray:
    """Per-cell predictive standard deviation averaged over a split."""
    model, ckpt_dict = model_from_checkpoint(ckpt)
    distribution = ckpt_dict["model_config"]["distribution"]
    episodes = load_split(dataset, split)
    if not episodes:
        raise ValueError(f"split {split!r} is empty")
    total = np.zeros(episodes[0].spec.shape, dtype=np.float64)
    for _, pred in _iter_eval_predictions(model, distribution, episodes):
        if isinstance(pred, ZIGParams):
            _, var = zig_mean_variance(pred)
            total += np.sqrt(var)
        else:
            total += pred.sigma
    return total / len(episodes)


def summarize_reports(reports: Sequence[MetricReport]) -> dict:
    """Mean and sample std per metric across seeds; None entries are skipped."""
    if not reports:
        raise ValueError("no reports to summarize")

    def stat(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}

    out: dict = {"n_reports": len(reports)}
    for fieldname in ("csi", "fbi"):
        per = {}
        for thr in getattr(reports[0], fieldname):
            per[f"{thr:g}"] = stat([getattr(r, fieldname)[thr] for r in reports])
        out[fieldname] = per
    fss: dict = {}
    for (thr, nb) in reports[0].fss:
        fss.setdefault(f"{thr:g}", {})[str(nb)] = stat(
            [r.fss[(thr, nb)] for r in reports])
    out["fss"] = fss
    for scalar in ("crps", "mae", "mse"):
        out[scalar] = stat([getattr(r, scalar) for r in reports])
    return out
