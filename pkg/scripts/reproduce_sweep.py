#!/usr/bin/env python3
"""Run a preset (or YAML scenario) over its sigma grid and write the CSV.

    python scripts/reproduce_sweep.py distributed_2user --out results/d2.csv
    python scripts/reproduce_sweep.py distributed_3user --scale 0.3 --jobs 4

``--scale`` shrinks the training set, step count and evaluation set together,
which is handy for a first look before committing to an overnight run.
"""
import argparse
import logging
import time
from dataclasses import replace

from cdnnsched import experiment as ex


def scaled(scenario: ex.ScenarioConfig, factor: float) -> ex.ScenarioConfig:
    if factor == 1.0:
        return scenario
    t = scenario.train
    n_train = max(t.batch_size, int(t.n_train * factor))
    train = replace(t, n_train=n_train, batch_size=min(t.batch_size, n_train),
                    steps=max(1, int(t.steps * factor)))
    return replace(scenario, train=train, n_eval=max(1000, int(scenario.n_eval * factor)))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("scenario", help="preset name or YAML path")
    ap.add_argument("--out", default=None)
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--checkpoint-dir", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    scenario = scaled(ex.load_scenario(args.scenario), args.scale)
    out = args.out or f"{scenario.name}.csv"
    start = time.perf_counter()
    rows = ex.run_sweep(scenario, out_path=out, seed=args.seed, jobs=args.jobs,
                        checkpoint_dir=args.checkpoint_dir)
    print(f"{len(rows)} rows -> {out} in {time.perf_counter() - start:.0f}s")
    for r in rows:
        if r.metric == "sum_rate":
            print(f"sigma={r.sigma:<4g} {r.policy:<15} {r.value:.4f} +/- {r.ci_halfwidth:.4f}")


if __name__ == "__main__":
    main()
