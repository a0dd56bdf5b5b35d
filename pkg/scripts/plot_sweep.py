#!/usr/bin/env python3
"""Plot sum rate versus sigma and the learned transmit fractions from a sweep CSV.

Needs matplotlib, which the package itself does not depend on.

    python scripts/plot_sweep.py results/d2.csv --out d2.png
"""
import argparse
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from cdnnsched.experiment import read_csv  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("--out", default="sweep.png")
    args = ap.parse_args()

    rows = read_csv(args.csv)
    rate = defaultdict(list)
    frac = defaultdict(list)
    for r in rows:
        if r["metric"] == "sum_rate":
            rate[r["policy"]].append((float(r["sigma"]), float(r["value"]), float(r["ci_halfwidth"])))
        elif r["metric"] == "transmit_fraction" and r["policy"] in ("cdnn", "locally_robust"):
            frac[(r["policy"], r["tx_index"])].append((float(r["sigma"]), float(r["value"])))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for policy, pts in sorted(rate.items()):
        s, v, h = zip(*sorted(pts))
        ax1.errorbar(s, v, yerr=h, marker="o", ms=3, capsize=2, label=policy)
    ax1.set_xlabel("sigma")
    ax1.set_ylabel("expected sum rate [bit/channel use]")
    ax1.legend()
    for (policy, tx), pts in sorted(frac.items()):
        s, v = zip(*sorted(pts))
        ax2.plot(s, v, marker="o", ms=3, label=f"{policy} TX{tx}")
    ax2.set_xlabel("sigma")
    ax2.set_ylabel("transmit fraction")
    ax2.set_ylim(-0.05, 1.05)
    ax2.legend()
    fig.suptitle(rows[0]["scenario"] if rows else "")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
