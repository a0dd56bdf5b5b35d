"""Command line entry point: ``cdnnsched {presets,pretrain,train,eval,sweep}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import training as tr
from .checkpoint import load_policies, save_policies


def _grid(args, scenario):
    return ex.parse_sigma_grid(args.sigma_grid) if args.sigma_grid else scenario.sigma_grid


def _points(args):
    scenario = ex.load_scenario(args.scenario)
    grid = _grid(args, scenario)
    scenario.csi.check(grid)
    seed = scenario.train.seed if args.seed is None else args.seed
    return scenario, [ex.SweepPoint(scenario, s, i, seed) for i, s in enumerate(grid)]


def _require_dir(args):
    if not args.checkpoint_dir:
        sys.exit(f"{args.command}: --checkpoint-dir is required")
    return Path(args.checkpoint_dir)


def cmd_presets(args):
    if args.scenario:
        sys.stdout.write(ex.dump_scenario(ex.load_scenario(args.scenario)))
        return
    for name, (_, desc) in ex.PRESETS.items():
        print(f"{name}\t{desc}")


def cmd_pretrain(args):
    ckdir = _require_dir(args)
    _, points = _points(args)
    for p in points:
        cfg = p.train_config
        pset = tr.init_policy_set(p.train_set(), cfg)
        path = save_policies(pset, ex.point_dir(ckdir, p.sigma) / "pretrained.npz", cfg.seed)
        print(f"sigma={p.sigma:g}: {path}")


def cmd_train(args):
    ckdir = _require_dir(args)
    _, points = _points(args)
    for p in points:
        cfg = p.train_config
        pdir = ex.point_dir(ckdir, p.sigma)
        train_set = p.train_set()
        pre = pdir / "pretrained.npz"
        if pre.exists():
            init, _ = load_policies(pre)
        else:
            init = tr.init_policy_set(train_set, cfg)
            save_policies(init, pre, cfg.seed)
        history = []
        pset = tr.train_joint(init, train_set, cfg, history=history,
                              on_checkpoint=lambda step, ps: save_policies(ps, pdir / "cdnn.npz", cfg.seed))
        save_policies(pset, pdir / "cdnn.npz", cfg.seed)
        with open(pdir / "objective.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "objective"))
            w.writerows((i + 1, f"{v:.6g}") for i, v in enumerate(history))
        if "locally_robust" in p.scenario.policies:
            save_policies(tr.train_locally_robust_set(train_set, cfg), pdir / "locally_robust.npz", cfg.seed)
        print(f"sigma={p.sigma:g}: {pdir}")


def cmd_eval(args):
    ckdir = _require_dir(args)
    _, points = _points(args)
    rows = []
    for p in points:
        pdir = ex.point_dir(ckdir, p.sigma)
        learned = {}
        for name in ex.LEARNED:
            path = pdir / f"{name}.npz"
            if name in p.scenario.policies and path.exists():
                learned[name], _ = load_policies(path)
        rows += ex.evaluate_point(p, p.eval_set(), learned)
    _emit(rows, args.out)


def cmd_sweep(args):
    scenario = ex.load_scenario(args.scenario)
    rows = ex.run_sweep(scenario, _grid(args, scenario), None, args.seed, args.jobs, args.checkpoint_dir)
    _emit(rows, args.out)


def _emit(rows, out):
    if out:
        ex.write_csv(rows, out)
    else:
        sys.stdout.write(ex.rows_to_csv(rows))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdnnsched", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "presets": (cmd_presets, "list presets, or print one as YAML with --scenario"),
        "pretrain": (cmd_pretrain, "fit each TX network to the naive decisions"),
        "train": (cmd_train, "joint training of the collaborative networks (+ locally robust)"),
        "eval": (cmd_eval, "evaluate checkpoints and baselines on a fresh evaluation set"),
        "sweep": (cmd_sweep, "train and evaluate every policy over a sigma grid"),
    }
    for name, (fn, help_) in handlers.items():
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--scenario", required=name != "presets", help="YAML scenario file or preset name")
        if name == "presets":
            continue
        p.add_argument("--sigma-grid", help="a:b:step (inclusive), comma list, or single value")
        p.add_argument("--seed", type=int, help="root seed (default: train.seed of the scenario)")
        p.add_argument("--checkpoint-dir")
        if name in ("eval", "sweep"):
            p.add_argument("--out", help="CSV output path (default: stdout)")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel sigma points")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except ex.ScenarioError as exc:
        sys.exit(f"error: {exc}")


if __name__ == "__main__":
    main()
