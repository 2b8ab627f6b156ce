"""Analyst/attacker generator mismatch: residual categories and per-family detection.

    python3 scripts/mismatch.py --seeds 0 1 2 --out runs/mismatch [--config cfg.yaml]
"""
import argparse
import dataclasses

from dfid import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/mismatch")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    cfg = dataclasses.replace(cfg, mode="mismatch_matrix", seeds=tuple(args.seeds), compare=())
    report = ex.run_experiment(cfg, out_dir=args.out, threads=args.threads)

    print(f"{'category':<10}{'near-idem':>11}{'e1/e0':>9}")
    for cat, v in report["residuals"]["categories"].items():
        print(f"{cat:<10}{v['near_idem_fraction_mean']:>11.3f}{v['median_ratio_mean']:>9.3f}")
    fams = report["summary"]["proposed"]["family_mean_auc"]
    print("detection AUC by deepfake family: " + ", ".join(f"{f} {a:.4f}" for f, a in fams.items()))


if __name__ == "__main__":
    main()
