"""Command-line surface: dataset synthesis, training, evaluation, plots.

Subcommands under the ``d2g`` entry point:

    data synth   build a synthetic dataset
    train        optimize a model on a dataset
    eval         score a checkpoint on a split, JSON report to stdout
    densify      run one episode through a checkpoint, write rasters
    sweep        density sweep over nested station subsets
    ablate       train and score a model-variant x seed matrix
    plot         PNG panels for one episode (inputs, prediction, truth)
    compare      pairwise CSI agreement table across exported prediction sets

Every file-writing subcommand records the resolved configuration and a
version string in its artifacts. Exit status is 0 on success; failures
print a one-line diagnostic to stderr and return nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .baselines_ablations import ABLATION_NAMES, apply_ablation
from .grid_domain import (
    GridSpec,
    PI0_MIN,
    ZIGParams,
    load_episode,
    zig_mean_variance,
)
from .model import ModelConfig
from .synthetic_episodes import (
    DatasetConfig,
    DatasetIndex,
    ensure_dataset,
    load_split,
    read_dataset,
)
from .training_harness import (
    TrainConfig,
    default_cache_root,
    ensure_trained,
    evaluate_checkpoint,
    evaluate_idw,
    load_checkpoint,
    model_from_checkpoint,
    density_sweep,
    summarize_reports,
    train,
)
from .verification_metrics import (
    GaussianPrediction,
    MetricAccumulator,
    MetricConfig,
    csi_from_counts,
    threshold_counts,
)

PREDICTION_SET_VERSION = 1
DATA_ROOT_ENV = "D2G_DATA_ROOT"

_RASTERS_BY_DISTRIBUTION = {
    "zig": ("mean", "std", "pi0", "alpha", "beta"),
    "gamma": ("mean", "std", "pi0", "alpha", "beta"),
    "gaussian": ("mean", "std"),
}


def version_string() -> str:
    """Package version, extended with the git description when available."""
    root = Path(__file__).resolve().parents[2]
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=root, capture_output=True, text=True,
                             timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except OSError:
        pass
    return __version__


# ------------------------------------------------------------- config files


def _read_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed config file {p}: {e}") from e
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {p} must hold a JSON object")
    return cfg


def _deep_merge(base: dict, override: dict) -> dict:
    """Nested-dict merge; non-dict values (lists included) replace."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _resolve_dataset_config(cfg: dict, seed: Optional[int]) -> DatasetConfig:
    section = dict(cfg.get("dataset", {}))
    if seed is not None:
        section["seed"] = seed
    return DatasetConfig.from_dict(_deep_merge(DatasetConfig().to_dict(), section))


def _resolve_model_config(cfg: dict) -> ModelConfig:
    section = cfg.get("model", {})
    return ModelConfig.from_dict(_deep_merge(ModelConfig().to_dict(), section))


def _resolve_train_config(cfg: dict, profile: str, seed: Optional[int]) -> TrainConfig:
    base = TrainConfig.desk() if profile == "desk" else TrainConfig()
    section = dict(cfg.get("train", {}))
    if seed is not None:
        section["seed"] = seed
    return TrainConfig.from_dict(_deep_merge(base.to_dict(), section))


def _metric_config_for(grid: GridSpec) -> MetricConfig:
    """Default metrics, with neighborhoods too big for the grid dropped."""
    base = MetricConfig()
    fits = tuple(n for n in base.fss_neighborhoods_cells
                 if n <= min(grid.shape))
    if fits == base.fss_neighborhoods_cells:
        return base
    if not fits:
        fits = (min(grid.shape),)
    return MetricConfig(thresholds_mm=base.thresholds_mm,
                        fss_neighborhoods_cells=fits,
                        rain_event_threshold_mm=base.rain_event_threshold_mm)


def _open_dataset(path: Optional[str]) -> DatasetIndex:
    root = path or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(
            f"no dataset given: pass --data or set ${DATA_ROOT_ENV}")
    return read_dataset(root)


def _run_record(args_cfg: dict, **extra) -> dict:
    return {"version": version_string(), "resolved_config": args_cfg, **extra}


# -------------------------------------------------------- prediction export


def _prediction_rasters(model, episode, distribution: str) -> dict[str, np.ndarray]:
    """Forward one episode; rasters keyed per _RASTERS_BY_DISTRIBUTION.

    Distribution parameters are stored exactly as the float32 forward
    produced them; mean/std are derived in float64 and quantized back, so
    they match an in-memory recomputation within one float32 rounding.
    """
    from .training_harness import collate_episodes

    batch = collate_episodes([episode])
    with torch.no_grad():
        params = model(batch["station_values"], batch["station_context"],
                       batch["radar_values"], batch["radar_valid"])
    raw = {k: v[0].numpy() for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    if distribution == "gaussian":
        out["mean"] = raw["mu"]
        out["std"] = raw["sigma"]
        return out
    pi0 = raw["pi0"] if distribution == "zig" else np.full_like(raw["alpha"], PI0_MIN)
    zig = ZIGParams(pi0=pi0.astype(np.float64),
                    alpha=raw["alpha"].astype(np.float64),
                    beta=raw["beta"].astype(np.float64))
    mean, var = zig_mean_variance(zig)
    out["mean"] = mean.astype(np.float32)
    out["std"] = np.sqrt(var).astype(np.float32)
    out["pi0"] = pi0.astype(np.float32)
    out["alpha"] = raw["alpha"]
    out["beta"] = raw["beta"]
    return out


def _write_rasters(directory: Path, rasters: dict[str, np.ndarray],
                   manifest: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in rasters.items():
        np.ascontiguousarray(arr, dtype="<f4").tofile(directory / name)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def _read_rasters(directory: Path, names: Sequence[str],
                  shape: tuple[int, int]) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"prediction raster missing: {path}")
        out[name] = np.fromfile(path, dtype="<f4").reshape(shape)
    return out


def export_predictions(checkpoint, dataset: DatasetIndex, split: str,
                       out_dir) -> Path:
    """Write per-episode mean/std/parameter rasters plus a set manifest."""
    model, ckpt = model_from_checkpoint(checkpoint)
    distribution = ckpt["model_config"]["distribution"]
    raster_names = _RASTERS_BY_DISTRIBUTION[distribution]
    episodes = load_split(dataset, split)
    dirs = dataset.episode_dirs(split)
    out = Path(out_dir)
    entries = []
    for i, (ep, src) in enumerate(zip(episodes, dirs)):
        rel = f"ep_{i:05d}"
        rasters = _prediction_rasters(model, ep, distribution)
        _write_rasters(out / rel, rasters, {
            "format_version": PREDICTION_SET_VERSION,
            "grid": ep.spec.to_dict(),
            "rasters": list(raster_names),
        })
        entries.append({"dir": rel, "source": str(Path(src).resolve())})
    manifest = {
        "format_version": PREDICTION_SET_VERSION,
        "kind": "prediction_set",
        "version": version_string(),
        "distribution": distribution,
        "split": split,
        "dataset_root": str(dataset.root),
        "model_config": ckpt["model_config"],
        "train_config": ckpt["train_config"],
        "grid": dataset.grid.to_dict(),
        "episodes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True))
    return out / "manifest.json"


def load_prediction_set(root) -> tuple[dict, list[dict]]:
    """Set manifest plus per-episode raster dicts, in manifest order."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no prediction set manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != PREDICTION_SET_VERSION:
        raise ValueError(
            f"unsupported prediction set version {manifest.get('format_version')!r}")
    shape = GridSpec.from_dict(manifest["grid"]).shape
    names = _RASTERS_BY_DISTRIBUTION[manifest["distribution"]]
    rasters = [_read_rasters(root / e["dir"], names, shape)
               for e in manifest["episodes"]]
    return manifest, rasters


def _prediction_from_rasters(rasters: dict[str, np.ndarray], distribution: str):
    if distribution == "gaussian":
        return GaussianPrediction(mu=rasters["mean"].astype(np.float64),
                                  sigma=rasters["std"].astype(np.float64))
    return ZIGParams(pi0=rasters["pi0"].astype(np.float64),
                     alpha=rasters["alpha"].astype(np.float64),
                     beta=rasters["beta"].astype(np.float64))


def evaluate_prediction_set(root, metric_config: Optional[MetricConfig] = None):
    """Score an exported set against its source episodes' target cells.

    Parameter rasters round-trip the float32 forward outputs exactly, so
    this reproduces the checkpoint evaluation bit for bit.
    """
    manifest, raster_list = load_prediction_set(root)
    acc = MetricAccumulator(metric_config or MetricConfig())
    for entry, rasters in zip(manifest["episodes"], raster_list):
        ep = load_episode(entry["source"])
        pred = _prediction_from_rasters(rasters, manifest["distribution"])
        acc.add(pred, ep.station_values[-1].astype(np.float64), ep.target_mask)
    return acc.report()


def compare_prediction_sets(roots: Sequence, thresholds: Optional[Sequence[float]] = None) -> dict:
    """Pairwise CSI agreement between the mean rasters of saved sets."""
    if len(roots) < 2:
        raise ValueError("compare needs at least two prediction sets")
    thresholds = tuple(thresholds or MetricConfig().thresholds_mm)
    loaded = [load_prediction_set(r) for r in roots]
    shapes = {GridSpec.from_dict(m["grid"]).shape for m, _ in loaded}
    counts = {len(r) for _, r in loaded}
    if len(shapes) != 1 or len(counts) != 1:
        raise ValueError("prediction sets differ in grid or episode count")
    labels = [str(r) for r in roots]
    valid = np.ones(next(iter(shapes)), dtype=bool)
    table: dict = {"thresholds": list(thresholds), "sets": labels, "csi": {}}
    for i in range(len(loaded)):
        for j in range(i + 1, len(loaded)):
            per_thr = {}
            for t in thresholds:
                pooled = None
                for ra, rb in zip(loaded[i][1], loaded[j][1]):
                    c = threshold_counts(ra["mean"].astype(np.float64),
                                         rb["mean"].astype(np.float64),
                                         valid, t)
                    pooled = c if pooled is None else pooled + c
                per_thr[f"{t:g}"] = csi_from_counts(pooled)
            table["csi"][f"{labels[i]} vs {labels[j]}"] = per_thr
    return table


# ------------------------------------------------------------------- plots


def _save_panels(episode, rasters: Optional[dict], out_path: Path,
                 metadata: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import LogNorm

    panels: list[tuple[str, np.ndarray, Optional[np.ndarray]]] = [
        ("stations (last hour)", episode.station_values[-1],
         episode.context_mask[-1]),
        ("radar", episode.radar.values, None),
    ]
    if rasters is not None:
        panels.append(("prediction mean", rasters["mean"], None))
        panels.append(("predictive std", rasters["std"], None))
    if episode.truth is not None:
        panels.append(("truth", episode.truth.values, None))

    rain_max = max(float(np.max(p[1])) for p in panels)
    vmax = max(rain_max, 0.2)
    cmap = plt.get_cmap("viridis").copy()
    dry = "#d9d9d9"  # distinct no-rain color outside the log ramp
    cmap.set_under(dry)
    cmap.set_bad(dry)

    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    for ax, (title, values, mask) in zip(np.atleast_1d(axes), panels):
        shown = np.ma.masked_where(mask == 0, values) if mask is not None \
            else np.asarray(values, dtype=np.float64)
        im = ax.imshow(shown, cmap=cmap, norm=LogNorm(vmin=0.1, vmax=vmax),
                       origin="upper", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=130,
                metadata={"Description": json.dumps(metadata, sort_keys=True)})
    plt.close(fig)


def _plot_sweep_curve(sweep: dict, out_path: Path, metadata: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fractions = sorted(sweep)
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for t in MetricConfig().thresholds_mm[:3]:
        ys = [sweep[f].csi.get(t) for f in fractions]
        if any(y is not None for y in ys):
            ax.plot(fractions, [np.nan if y is None else y for y in ys],
                    marker="o", label=f"CSI {t:g} mm")
    ax.set_xlabel("station context fraction")
    ax.set_ylabel("CSI")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=130,
                metadata={"Description": json.dumps(metadata, sort_keys=True)})
    plt.close(fig)


# ------------------------------------------------------------- subcommands


def _episode_from_args(args) -> tuple:
    if args.episode:
        return load_episode(args.episode), str(args.episode)
    dataset = _open_dataset(args.data)
    dirs = dataset.episode_dirs(args.split)
    if not dirs:
        raise FileNotFoundError(f"split {args.split!r} has no episodes")
    if not 0 <= args.index < len(dirs):
        raise ValueError(f"--index {args.index} out of range for "
                         f"{len(dirs)} episodes")
    return load_episode(dirs[args.index]), str(dirs[args.index])


def cmd_data_synth(args) -> int:
    cfg = _read_config_file(args.config)
    dcfg = _resolve_dataset_config(cfg, args.seed)
    out = args.out or os.environ.get(DATA_ROOT_ENV)
    if not out:
        raise ValueError(f"pass --out or set ${DATA_ROOT_ENV}")
    index = ensure_dataset(dcfg, out)
    record = _run_record({"dataset": dcfg.to_dict()},
                         episodes={s: len(index.episode_dirs(s))
                                   for s in ("train", "val", "test")})
    (index.root / "run.json").write_text(json.dumps(record, indent=2))
    print(json.dumps({"root": str(index.root), **record["episodes"]}))
    return 0


def cmd_train(args) -> int:
    cfg = _read_config_file(args.config)
    dataset = _open_dataset(args.data)
    model_cfg = _resolve_model_config(cfg)
    if args.ablation != "full":
        model_cfg = apply_ablation(model_cfg, args.ablation,
                                   grid_shape=dataset.grid.shape)
    train_cfg = _resolve_train_config(cfg, args.profile, args.seed)
    out = Path(args.out)
    result = train(model_cfg, dataset, train_cfg, out, ablation=args.ablation)
    record = _run_record(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
         "ablation": args.ablation, "dataset": dataset.manifest["config"]},
        best_val_loss=result.best_val_loss, best_step=result.best_step)
    (out / "run.json").write_text(json.dumps(record, indent=2))
    print(json.dumps({"checkpoint": str(result.checkpoint_path),
                      "best_val_loss": result.best_val_loss,
                      "best_step": result.best_step}))
    return 0


def cmd_eval(args) -> int:
    dataset = _open_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(ckpt, dataset, split=args.split,
                                 metric_config=_metric_config_for(dataset.grid))
    payload = report.to_dict()
    print(json.dumps(payload, indent=2))
    if args.out:
        record = _run_record(
            {"model": ckpt["model_config"], "train": ckpt["train_config"],
             "checkpoint": str(args.checkpoint), "split": args.split},
            report=payload)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(record, indent=2))
    return 0


def cmd_densify(args) -> int:
    episode, source = _episode_from_args(args)
    model, ckpt = model_from_checkpoint(args.checkpoint)
    distribution = ckpt["model_config"]["distribution"]
    rasters = _prediction_rasters(model, episode, distribution)
    out = Path(args.out)
    _write_rasters(out, rasters, {
        "format_version": PREDICTION_SET_VERSION,
        "grid": episode.spec.to_dict(),
        "rasters": sorted(rasters),
        "source": source,
        **_run_record({"model": ckpt["model_config"],
                       "checkpoint": str(args.checkpoint)}),
    })
    print(json.dumps({"out": str(out), "rasters": sorted(rasters)}))
    return 0


def cmd_export(args) -> int:
    dataset = _open_dataset(args.data)
    manifest = export_predictions(args.checkpoint, dataset, args.split,
                                  args.out)
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def cmd_sweep(args) -> int:
    dataset = _open_dataset(args.data)
    sweep = density_sweep(args.checkpoint, dataset, args.fractions,
                          split=args.split, seed=args.seed or 0,
                          metric_config=_metric_config_for(dataset.grid))
    payload = {f"{f:g}": rep.to_dict() for f, rep in sorted(sweep.items())}
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = load_checkpoint(args.checkpoint)
        record = _run_record(
            {"model": ckpt["model_config"], "checkpoint": str(args.checkpoint),
             "fractions": list(args.fractions), "split": args.split},
            reports=payload)
        (out / "sweep.json").write_text(json.dumps(record, indent=2))
        _plot_sweep_curve(sweep, out / "sweep.png", record["resolved_config"])
    return 0


def cmd_ablate(args) -> int:
    cfg = _read_config_file(args.config)
    dataset = _open_dataset(args.data)
    base = _resolve_model_config(cfg)
    cache = args.cache or default_cache_root()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries: dict = {}
    for variant in args.ablations:
        reports = []
        for seed in args.seeds:
            mc = apply_ablation(base, variant, grid_shape=dataset.grid.shape)
            tc = _resolve_train_config(cfg, args.profile, seed)
            ckpt = ensure_trained(mc, dataset, tc, variant, cache)
            reports.append(evaluate_checkpoint(
                ckpt, dataset, split=args.split,
                metric_config=_metric_config_for(dataset.grid)))
        summaries[variant] = summarize_reports(reports)
        csi = summaries[variant]["csi"]["0.2"]
        print(f"{variant:>14}  csi(0.2) {csi['mean']:.4f} +- {csi['std']:.4f}")
    summaries["idw"] = summarize_reports(
        [evaluate_idw(dataset, split=args.split,
                      metric_config=_metric_config_for(dataset.grid))])
    record = _run_record(
        {"model": base.to_dict(), "profile": args.profile,
         "seeds": list(args.seeds), "ablations": list(args.ablations),
         "dataset": dataset.manifest["config"]},
        summaries=summaries)
    (out / "ablations.json").write_text(json.dumps(record, indent=2))
    return 0


def cmd_plot(args) -> int:
    episode, source = _episode_from_args(args)
    rasters = None
    meta: dict = {"episode": source, "version": version_string()}
    if args.checkpoint:
        model, ckpt = model_from_checkpoint(args.checkpoint)
        rasters = _prediction_rasters(model, episode,
                                      ckpt["model_config"]["distribution"])
        meta["model_config"] = ckpt["model_config"]
    _save_panels(episode, rasters, Path(args.out), meta)
    print(json.dumps({"out": str(args.out)}))
    return 0


def cmd_compare(args) -> int:
    table = compare_prediction_sets(args.sets)
    print(json.dumps(table, indent=2))
    if args.out:
        record = _run_record({"sets": [str(s) for s in args.sets]},
                             table=table)
        Path(args.out).write_text(json.dumps(record, indent=2))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2g", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="JSON config overrides")
        if "seed" in flags:
            sp.add_argument("--seed", type=int, default=None)
        if "data" in flags:
            sp.add_argument("--data", default=None,
                            help=f"dataset root (default ${DATA_ROOT_ENV})")
        if "split" in flags:
            sp.add_argument("--split", default="test",
                            choices=["train", "val", "test"])
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint", required=True)
        if "out" in flags:
            sp.add_argument("--out", required=True)

    data = sub.add_parser("data", help="dataset utilities")
    dsub = data.add_subparsers(dest="data_command", required=True)
    synth = dsub.add_parser("synth", help="build a synthetic dataset")
    common(synth, "config", "seed")
    synth.add_argument("--out", default=None)
    synth.set_defaults(func=cmd_data_synth)

    tr = sub.add_parser("train", help="train a model")
    common(tr, "config", "seed", "data", "out")
    tr.add_argument("--profile", choices=["desk", "paper"], default="desk")
    tr.add_argument("--ablation", choices=list(ABLATION_NAMES), default="full")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint")
    common(ev, "data", "split", "checkpoint")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    de = sub.add_parser("densify", help="one episode to prediction rasters")
    common(de, "data", "split", "checkpoint", "out")
    de.add_argument("--episode", default=None, help="episode directory")
    de.add_argument("--index", type=int, default=0)
    de.set_defaults(func=cmd_densify)

    ex = sub.add_parser("export", help="export split predictions as rasters")
    common(ex, "data", "split", "checkpoint", "out")
    ex.set_defaults(func=cmd_export)

    sw = sub.add_parser("sweep", help="density sweep")
    common(sw, "seed", "data", "split", "checkpoint")
    sw.add_argument("--fractions", type=float, nargs="+",
                    default=[0.05, 0.25, 0.5, 1.0])
    sw.add_argument("--out", default=None)
    sw.set_defaults(func=cmd_sweep)

    ab = sub.add_parser("ablate", help="train and score the ablation matrix")
    common(ab, "config", "data", "split", "out")
    ab.add_argument("--profile", choices=["desk", "paper"], default="desk")
    ab.add_argument("--ablations", nargs="+", default=list(ABLATION_NAMES),
                    choices=list(ABLATION_NAMES))
    ab.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ab.add_argument("--cache", default=None, help="trained-run cache root")
    ab.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="PNG panels for one episode")
    common(pl, "data", "split", "out")
    pl.add_argument("--checkpoint", default=None)
    pl.add_argument("--episode", default=None)
    pl.add_argument("--index", type=int, default=0)
    pl.set_defaults(func=cmd_plot)

    cp = sub.add_parser("compare", help="pairwise CSI across prediction sets")
    cp.add_argument("sets", nargs="+", help="exported prediction set dirs")
    cp.add_argument("--out", default=None)
    cp.set_defaults(func=cmd_compare)

    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except KeyboardInterrupt:
        print("d2g: interrupted", file=sys.stderr)
        return 130
    except FileNotFoundError as e:
        print(f"d2g: missing file: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"d2g: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
