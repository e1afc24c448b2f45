"""Acceptance gate: eleven numbered end-to-end checks.

Each check prints one PASS/FAIL line on the terminal (bypassing capture) and
appends the same line to acceptance_report.txt at the repository root, then
asserts. Checks 1 to 6 are oracle and structure checks and run in seconds.
Checks 7 to 10 score trained models: they share one desk-profile run grid
(five variants, three seeds) through the on-disk run cache, so the first
execution on a machine trains for a few hours and later executions reuse the
finished runs. Check 11 retrains a tiny throwaway configuration.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from d2g.baselines_ablations import apply_ablation
from d2g.cli import evaluate_prediction_set, export_predictions
from d2g.grid_domain import GridSpec, ZIGParams, zig_mean_variance
from d2g.model import ModelConfig, build_model
from d2g.synthetic_episodes import (
    DatasetConfig,
    SplitPlan,
    ensure_dataset,
    write_dataset,
)
from d2g.training_harness import (
    TrainConfig,
    default_cache_root,
    density_sweep,
    ensure_trained,
    evaluate_checkpoint,
    evaluate_idw,
    load_checkpoint,
    train,
)
from d2g.verification_metrics import MetricConfig, crps_gamma, evaluate
from d2g.zig_head import nll_loss

REPORT = Path(__file__).resolve().parents[1] / "acceptance_report.txt"
SEEDS = (0, 1, 2)
GRID_VARIANTS = ("full", "no_bottleneck", "target_inputs", "gamma", "gaussian")
CSI_THRESHOLD = 0.2


@pytest.fixture(scope="module", autouse=True)
def _fresh_report():
    REPORT.write_text("")


def _emit(capsys, ok: bool, number: int, text: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {text}"
    with capsys.disabled():
        print(line)
    with REPORT.open("a") as f:
        f.write(line + "\n")


@contextmanager
def criterion(capsys, number: int, title: str):
    """Yields a result holder; emits exactly one report line per check."""
    holder = SimpleNamespace(ok=False, detail="")
    start = time.time()
    try:
        yield holder
    except Exception as exc:  # noqa: BLE001 - the line must still be emitted
        _emit(capsys, False, number, f"{title}: crashed: {exc!r}")
        raise
    elapsed = time.time() - start
    _emit(capsys, holder.ok, number, f"{title}: {holder.detail} [{elapsed:.1f}s]")
    assert holder.ok, f"criterion {number} failed: {holder.detail}"


# ------------------------------------------------------------ shared runs


@pytest.fixture(scope="module")
def desk_dataset():
    return ensure_dataset(DatasetConfig(), default_cache_root() / "dataset_desk")


@pytest.fixture(scope="module")
def grid(desk_dataset):
    """Checkpoints and test-split reports for every (variant, seed) cell."""
    out = {}
    for variant in GRID_VARIANTS:
        for seed in SEEDS:
            model_config = apply_ablation(ModelConfig(), variant)
            ckpt = ensure_trained(
                model_config, desk_dataset, TrainConfig.desk(seed=seed),
                ablation=variant,
            )
            report = evaluate_checkpoint(ckpt, desk_dataset, split="test")
            out[(variant, seed)] = (ckpt, report)
    out["idw"] = evaluate_idw(desk_dataset, split="test")
    return out


def _csi_by_seed(grid, variant) -> list[float]:
    return [grid[(variant, s)][1].csi[CSI_THRESHOLD] for s in SEEDS]


def _pooled_std(a: list[float], b: list[float]) -> float:
    va = float(np.var(a, ddof=1)) if len(a) > 1 else 0.0
    vb = float(np.var(b, ddof=1)) if len(b) > 1 else 0.0
    return math.sqrt((va + vb) / 2.0)


# -------------------------------------------------------------- criteria


class TestAcceptance:
    def test_01_zig_moment_oracle(self, capsys):
        with criterion(capsys, 1, "ZIG moments vs Monte-Carlo") as c:
            rng = np.random.default_rng(20260816)
            n = 1_000_000
            worst_z = 0.0
            zero_branch = 0
            for k in range(20):
                # force one case on each side of the indicator threshold
                pi0 = (0.2, 0.8)[k] if k < 2 else float(rng.uniform(0.05, 0.95))
                alpha = float(rng.uniform(0.3, 5.0))
                beta = float(rng.uniform(0.2, 3.0))
                params = ZIGParams(
                    pi0=np.array([pi0]), alpha=np.array([alpha]), beta=np.array([beta])
                )
                mean, var = zig_mean_variance(params)
                mean, var = float(mean[0]), float(var[0])
                if 1.0 - pi0 >= 0.5:
                    draws = rng.gamma(alpha, 1.0 / beta, size=n)
                    m = float(draws.mean())
                    s2 = float(draws.var(ddof=1))
                    se_mean = float(draws.std(ddof=1)) / math.sqrt(n)
                    m4 = float(np.mean((draws - m) ** 4))
                    se_var = math.sqrt(max(m4 - s2 * s2, 0.0) / n)
                    worst_z = max(
                        worst_z, abs(mean - m) / se_mean, abs(var - s2) / se_var
                    )
                else:
                    # the indicator zeroes the distribution; MC is exact
                    zero_branch += 1
                    if mean != 0.0 or var != 0.0:
                        c.detail = f"dry branch returned ({mean}, {var}), expected zeros"
                        return
            c.ok = worst_z <= 4.0 and zero_branch >= 1
            c.detail = (
                f"20 cases ({zero_branch} dry), 1e6 draws each, "
                f"max |z| {worst_z:.2f} vs limit 4"
            )

    def test_02_gamma_crps_oracle(self, capsys):
        with criterion(capsys, 2, "closed-form gamma CRPS vs Monte-Carlo") as c:
            anchor = float(np.asarray(crps_gamma(1.0, 1.0, 0.0)))
            rng = np.random.default_rng(421)
            n = 4_000_000
            worst_rel = 0.0
            for k in range(20):
                alpha = float(rng.uniform(0.5, 4.0))
                beta = float(rng.uniform(0.2, 1.5))
                y = 0.0 if k % 5 == 0 else float(rng.uniform(0.25, 2.0) * alpha / beta)
                closed = float(np.asarray(crps_gamma(alpha, beta, y)))
                draws = rng.gamma(alpha, 1.0 / beta, size=n)
                term_y = float(np.abs(draws - y).mean())
                half = n // 2
                term_pair = float(np.abs(draws[:half] - draws[half:]).mean())
                mc = term_y - 0.5 * term_pair
                worst_rel = max(worst_rel, abs(closed - mc) / abs(closed))
            c.ok = abs(anchor - 0.5) < 1e-9 and worst_rel <= 0.01
            c.detail = (
                f"anchor(1,1,0)={anchor:.9f}, 20 cases, "
                f"max rel dev {worst_rel:.3%} vs limit 1%"
            )

    def test_03_gradient_fidelity(self, capsys):
        with criterion(capsys, 3, "autodiff vs central finite differences") as c:
            torch.manual_seed(0)
            config = ModelConfig(
                timesteps=3, bottleneck_dropout=0.0, attention_dropout=0.0
            )
            model = build_model(config).double().eval()
            gen = torch.Generator().manual_seed(7)
            b, t, h, w = 1, 3, 16, 16
            context = (torch.rand((b, t, h, w), generator=gen) < 0.2).double()
            stations = torch.rand((b, t, h, w), generator=gen).double() * 3 * context
            radar = torch.rand((b, h, w), generator=gen).double() * 3
            radar_valid = (torch.rand((b, h, w), generator=gen) < 0.9).double()
            y = torch.rand((b, h, w), generator=gen).double() * 3
            y = y * (torch.rand((b, h, w), generator=gen) < 0.7)  # exact zeros too
            mask = torch.rand((b, h, w), generator=gen) < 0.15
            mask[0, 0, 0] = True

            def loss_value() -> torch.Tensor:
                params = model(stations, context, radar, radar_valid)
                return nll_loss(params, y, mask, "zig")

            loss_value().backward()
            tensors = [
                (name, p) for name, p in model.named_parameters()
                if p.requires_grad and p.grad is not None
            ]
            rng = np.random.default_rng(3)
            order = rng.permutation(len(tensors))
            picks = []
            while len(picks) < 52:
                name, p = tensors[order[len(picks) % len(tensors)]]
                picks.append((name, p, int(rng.integers(p.numel()))))
            step = 1e-4
            worst_rel = 0.0
            with torch.no_grad():
                for _, p, idx in picks:
                    flat = p.view(-1)
                    orig = flat[idx].item()
                    analytic = p.grad.view(-1)[idx].item()
                    flat[idx] = orig + step
                    upper = loss_value().item()
                    flat[idx] = orig - step
                    lower = loss_value().item()
                    flat[idx] = orig
                    fd = (upper - lower) / (2.0 * step)
                    rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
                    worst_rel = max(worst_rel, rel)
            c.ok = worst_rel <= 1e-4
            c.detail = (
                f"{len(picks)} parameters across {len(tensors)} tensors, "
                f"max rel dev {worst_rel:.2e} vs limit 1e-4"
            )

    def test_04_translation_equivariance(self, capsys):
        with criterion(capsys, 4, "circular-shift equivariance of the pipeline") as c:
            config = ModelConfig(
                padding_mode="circular", bottleneck_dropout=0.0, attention_dropout=0.0
            )
            model = build_model(config).double().eval()
            gen = torch.Generator().manual_seed(11)
            b, t, h, w = 1, config.timesteps, 32, 32
            context = (torch.rand((b, t, h, w), generator=gen) < 0.2).double()
            stations = torch.rand((b, t, h, w), generator=gen).double() * 3 * context
            radar = torch.rand((b, h, w), generator=gen).double() * 3
            radar_valid = (torch.rand((b, h, w), generator=gen) < 0.9).double()
            with torch.no_grad():
                base = model(stations, context, radar, radar_valid)
            worst = 0.0
            for di, dj in ((8, 0), (0, 8), (8, 8), (16, 24)):
                def roll(x):
                    return torch.roll(x, shifts=(di, dj), dims=(-2, -1))

                with torch.no_grad():
                    shifted = model(
                        roll(stations), roll(context), roll(radar), roll(radar_valid)
                    )
                for key, field in base.items():
                    diff = (shifted[key] - roll(field)).abs().max().item()
                    worst = max(worst, diff)
            c.ok = worst <= 1e-5
            c.detail = (
                f"shifts (8,0)/(0,8)/(8,8)/(16,24), "
                f"max abs output diff {worst:.2e} vs limit 1e-5"
            )

    def test_05_metric_oracles(self, capsys):
        with criterion(capsys, 5, "vectorized metrics vs naive loops") as c:
            thresholds = (0.2, 1.0, 2.0)
            neighborhoods = (2, 3)
            config = MetricConfig(
                thresholds_mm=thresholds, fss_neighborhoods_cells=neighborhoods
            )
            rng = np.random.default_rng(11)

            def naive_counts(pred, target, valid, thr):
                tp = fp = fn = 0
                h, w = pred.shape
                for i in range(h):
                    for j in range(w):
                        if not valid[i, j]:
                            continue
                        p = pred[i, j] >= thr
                        o = target[i, j] >= thr
                        tp += p and o
                        fp += p and not o
                        fn += o and not p
                return tp, fp, fn

            def naive_fss(pred, target, valid, thr, n):
                h, w = pred.shape
                lo, hi = n // 2, n - 1 - n // 2
                num = den = 0.0
                for i in range(h):
                    for j in range(w):
                        count = p_sum = o_sum = 0
                        for ii in range(i - lo, i + hi + 1):
                            for jj in range(j - lo, j + hi + 1):
                                if 0 <= ii < h and 0 <= jj < w and valid[ii, jj]:
                                    count += 1
                                    p_sum += pred[ii, jj] >= thr
                                    o_sum += target[ii, jj] >= thr
                        if count >= 1:
                            f_frac, o_frac = p_sum / count, o_sum / count
                            num += (f_frac - o_frac) ** 2
                            den += f_frac**2 + o_frac**2
                return None if den == 0.0 else 1.0 - num / den

            worst = 0.0
            agree = True

            def check(fast, slow):
                nonlocal worst, agree
                if fast is None or slow is None:
                    agree = agree and fast is None and slow is None
                else:
                    worst = max(worst, abs(fast - slow))

            for _ in range(10):
                pred = rng.gamma(1.2, 1.0, (8, 8)) * (rng.random((8, 8)) < 0.7)
                target = rng.gamma(1.2, 1.0, (8, 8)) * (rng.random((8, 8)) < 0.7)
                valid = rng.random((8, 8)) < 0.8
                valid[0, 0] = True
                report = evaluate(pred, target, valid, config)
                for thr in thresholds:
                    tp, fp, fn = naive_counts(pred, target, valid, thr)
                    check(report.csi[thr], None if tp + fp + fn == 0 else tp / (tp + fp + fn))
                    check(report.fbi[thr], None if tp + fn == 0 else (tp + fp) / (tp + fn))
                    for n in neighborhoods:
                        check(report.fss[(thr, n)], naive_fss(pred, target, valid, thr, n))
                errs = [
                    pred[i, j] - target[i, j]
                    for i in range(8) for j in range(8) if valid[i, j]
                ]
                check(report.mae, sum(abs(e) for e in errs) / len(errs))
                check(report.mse, sum(e * e for e in errs) / len(errs))
            c.ok = agree and worst <= 1e-10
            c.detail = (
                f"10 random 8x8 cases, CSI/FBI/FSS/MAE/MSE max abs dev "
                f"{worst:.2e} vs limit 1e-10"
            )

    def test_06_parameter_count(self, capsys):
        with criterion(capsys, 6, "full-profile trainable parameter count") as c:
            model = build_model(ModelConfig())
            count = sum(p.numel() for p in model.parameters() if p.requires_grad)
            c.ok = 172_800 <= count <= 211_200
            c.detail = f"{count} parameters vs window [172800, 211200]"

    def test_07_fusion_beats_idw_and_pixel_merge(self, grid, capsys):
        with criterion(capsys, 7, "fusion CSI margin over IDW and pixel merge") as c:
            full = _csi_by_seed(grid, "full")
            merge = _csi_by_seed(grid, "no_bottleneck")
            idw = grid["idw"].csi[CSI_THRESHOLD]
            mean_full = float(np.mean(full))
            mean_merge = float(np.mean(merge))
            margin_idw = mean_full - idw
            margin_merge = mean_full - mean_merge
            pooled_idw = _pooled_std(full, [idw])
            pooled_merge = _pooled_std(full, merge)
            c.ok = margin_idw > pooled_idw and margin_merge > pooled_merge
            c.detail = (
                f"CSI(0.2) full {mean_full:.4f} (seeds {[round(v, 4) for v in full]}), "
                f"idw {idw:.4f} (margin {margin_idw:.4f} > pooled std {pooled_idw:.4f}), "
                f"pixel merge {mean_merge:.4f} "
                f"(margin {margin_merge:.4f} > pooled std {pooled_merge:.4f})"
            )

    def test_08_scoring_context_cells_degrades(self, grid, capsys):
        with criterion(capsys, 8, "target_inputs ablation scores below full") as c:
            full = float(np.mean(_csi_by_seed(grid, "full")))
            leaky = float(np.mean(_csi_by_seed(grid, "target_inputs")))
            c.ok = leaky < full
            c.detail = f"CSI(0.2) target_inputs {leaky:.4f} < full {full:.4f}"

    def test_09_density_sweep_monotone(self, grid, desk_dataset, capsys):
        with criterion(capsys, 9, "station-density sweep is ordered") as c:
            fractions = (0.05, 0.25, 0.5, 1.0)
            curves = {f: [] for f in fractions}
            for seed in SEEDS:
                ckpt = grid[("full", seed)][0]
                sweep = density_sweep(ckpt, desk_dataset, fractions, seed=0)
                for f, report in sweep.items():
                    curves[f].append(report.csi[CSI_THRESHOLD])
            means = {f: float(np.mean(v)) for f, v in curves.items()}
            ends_ok = means[1.0] >= means[0.05]
            monotone_ok = True
            for prev, nxt in zip(fractions, fractions[1:]):
                slack = _pooled_std(curves[prev], curves[nxt])
                if means[nxt] < means[prev] - slack:
                    monotone_ok = False
            c.ok = ends_ok and monotone_ok
            c.detail = "CSI(0.2) by context fraction " + ", ".join(
                f"{f:g}: {means[f]:.4f}" for f in fractions
            )

    def test_10_distribution_ablations_ordered(self, grid, capsys):
        with criterion(capsys, 10, "gaussian < gamma < full ZIG on CSI") as c:
            full = float(np.mean(_csi_by_seed(grid, "full")))
            gamma = float(np.mean(_csi_by_seed(grid, "gamma")))
            gaussian = float(np.mean(_csi_by_seed(grid, "gaussian")))
            c.ok = gaussian < gamma < full
            c.detail = (
                f"CSI(0.2) gaussian {gaussian:.4f} < gamma {gamma:.4f} "
                f"< full {full:.4f}"
            )

    def test_11_determinism_and_round_trips(self, tmp_path, capsys):
        with criterion(capsys, 11, "bit-identical logs and lossless round trips") as c:
            dataset = write_dataset(
                DatasetConfig(
                    grid=GridSpec(height=16, width=16),
                    timesteps=3,
                    hours=81,
                    n_stations=40,
                    split=SplitPlan(train_days=1, val_days=1, test_days=1,
                                    blackout_hours=3),
                ),
                tmp_path / "data",
            )
            model_config = ModelConfig(channels=8, timesteps=3, heads=2, head_dim=4)
            train_config = TrainConfig(
                max_steps=4, batch_size=4, val_every_steps=2, seed=5
            )
            first = train(model_config, dataset, train_config, tmp_path / "run1")
            second = train(model_config, dataset, train_config, tmp_path / "run2")
            logs_ok = (
                Path(first.log_path).read_bytes() == Path(second.log_path).read_bytes()
            )

            ckpt = load_checkpoint(first.checkpoint_path)
            rewritten = tmp_path / "rewritten.pt"
            torch.save(ckpt, rewritten)
            reloaded = load_checkpoint(rewritten)
            ckpt_ok = all(
                torch.equal(ckpt[part][k], reloaded[part][k])
                for part in ("model_state", "ema_state")
                for k in ckpt[part]
            )

            metrics = MetricConfig(fss_neighborhoods_cells=(2, 8))
            export_predictions(
                first.checkpoint_path, dataset, "test", tmp_path / "preds"
            )
            direct = evaluate_checkpoint(
                first.checkpoint_path, dataset, split="test", metric_config=metrics
            )
            via_set = evaluate_prediction_set(tmp_path / "preds", metric_config=metrics)
            preds_ok = direct.to_dict() == via_set.to_dict()

            c.ok = logs_ok and ckpt_ok and preds_ok
            c.detail = (
                f"logs identical: {logs_ok}, checkpoint round trip: {ckpt_ok}, "
                f"prediction export reproduces evaluation: {preds_ok}"
            )
