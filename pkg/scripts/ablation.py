"""Proposed detector against its two ablations over several master seeds.

    python3 scripts/ablation.py --seeds 0 1 2 3 4 --out runs/ablation [--config cfg.yaml]
"""
import argparse
import dataclasses

from dfid import experiment as ex
from dfid.cli import format_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    cfg = dataclasses.replace(cfg, mode="proposed", seeds=tuple(args.seeds),
                              compare=("ablate_idempotence_only", "ablate_idfeatures_only"))
    report = ex.run_experiment(cfg, out_dir=args.out, threads=args.threads)
    print(format_report(report))
    means = {m: s["mean_over_seeds"] for m, s in report["summary"].items()}
    best = max(means, key=means.get)
    print(f"highest mean AUC: {best} ({means[best]:.4f})")


if __name__ == "__main__":
    main()
