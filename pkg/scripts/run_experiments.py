#!/usr/bin/env python3
"""Train the model-variant x seed grid on the synthetic dataset and summarize.

Runs are cached by configuration hash, so re-invoking after an interruption
resumes where it left off. Seed-major order puts one complete variant round
on disk as early as possible.
"""

import argparse
import json
import sys
import time

from d2g.baselines_ablations import ABLATION_NAMES, apply_ablation
from d2g.model import ModelConfig
from d2g.synthetic_episodes import DatasetConfig, ensure_dataset
from d2g.training_harness import (
    TrainConfig,
    default_cache_root,
    ensure_trained,
    evaluate_checkpoint,
    evaluate_idw,
    summarize_reports,
)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=None, help="run cache root")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--variants", nargs="+",
                    default=["full", "no_bottleneck", "target_inputs",
                             "gamma", "gaussian"],
                    choices=list(ABLATION_NAMES))
    args = ap.parse_args(argv)

    cache = args.cache or default_cache_root()
    dataset = ensure_dataset(DatasetConfig(), f"{cache}/dataset_desk")
    base = ModelConfig()
    reports: dict[str, list] = {v: [] for v in args.variants}

    for seed in args.seeds:
        for variant in args.variants:
            mc = apply_ablation(base, variant, grid_shape=dataset.grid.shape)
            tc = TrainConfig.desk(seed=seed, max_steps=args.steps)
            t0 = time.time()
            ckpt = ensure_trained(mc, dataset, tc, variant, cache)
            rep = evaluate_checkpoint(ckpt, dataset, split="test")
            reports[variant].append(rep)
            print(f"{variant:>14} seed={seed}  csi(0.2)={rep.csi[0.2]:.4f} "
                  f"crps={rep.crps:.4f}  [{time.time() - t0:.0f}s]",
                  flush=True)

    idw = evaluate_idw(dataset, split="test")
    print(f"{'idw':>14}         csi(0.2)={idw.csi[0.2]:.4f} crps={idw.crps:.4f}")
    for variant, reps in reports.items():
        s = summarize_reports(reps)
        print(f"{variant:>14} csi(0.2) {s['csi']['0.2']['mean']:.4f} "
              f"+- {s['csi']['0.2']['std']:.4f}  crps {s['crps']['mean']:.4f}")
    print(json.dumps({v: summarize_reports(r) for v, r in reports.items()},
                     indent=2), file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
