"""Error-probability sweep: per-identity vs pooled thresholds over (delta_u, sigma_mu).

    python3 scripts/sweep.py --out runs/sweep [--sign-aware] [--mc-n 100000]
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from dfid import theory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--mc-n", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sign-aware", action="store_true")
    args = ap.parse_args()

    sigma_mus = np.round(np.arange(0.0, 0.51, 0.1), 10)
    rows = theory.sweep(sigma_mus, (0.5, 1.0, 1.5), K=5, reps=args.reps, seed=args.seed,
                        mc_n=args.mc_n, sign_aware=args.sign_aware)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(theory.SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in theory.SWEEP_COLUMNS])

    print(f"{'delta_u':>8}" + "".join(f"{s:>10.1f}" for s in sigma_mus) + "   (gap x 1e3)")
    for du in (0.5, 1.0, 1.5):
        gaps = [r["gap"] * 1e3 for r in rows if r["delta_u"] == du]
        print(f"{du:>8.1f}" + "".join(f"{g:>10.3f}" for g in gaps))


if __name__ == "__main__":
    main()
