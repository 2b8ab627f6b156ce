"""Detector properties measured by changing one default at a time.

    python3 scripts/variants.py --seeds 0 1 2 3 4 [--only q0 beta0 amp0]

q0        identity decoder removed (q = 0) against the default q = 8
beta0     student trained with the imitation losses only (no trace-contrast phase)
amp0      generator signatures switched off; the teacher floor is lifted so the
          pipeline still runs (the texture blend still leaves a trace)
traceless signatures off and the full source texture kept, so deepfakes match
          the authentic distribution and detection should sit near chance
"""
import argparse
import dataclasses as dc
import time

import numpy as np

from dfid import experiment as ex


def variants(base):
    d = base.data
    return {
        "default": base,
        "q0": dc.replace(base, detector=dc.replace(base.detector, q=0)),
        "beta0": dc.replace(base, distill=dc.replace(base.distill,
                                                     schedule=((base.distill.epochs, 1.0, 0.0),))),
        "amp0": dc.replace(base, data=dc.replace(d, generator=dc.replace(d.generator, signature_amp=0.0)),
                           teacher=dc.replace(base.teacher, min_accuracy=0.0)),
        "traceless": dc.replace(base, data=dc.replace(d, generator=dc.replace(d.generator, signature_amp=0.0,
                                                                              blend=1.0)),
                                teacher=dc.replace(base.teacher, min_accuracy=0.0)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--only", nargs="+", choices=["default", "q0", "beta0", "amp0", "traceless"])
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    base = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    base = dc.replace(base, mode="proposed", compare=(), seeds=tuple(args.seeds))
    for name, cfg in variants(base).items():
        if args.only and name not in args.only:
            continue
        t0 = time.perf_counter()
        s = ex.run_experiment(cfg, threads=args.threads)["summary"]["proposed"]
        per_seed = " ".join(f"{v:.4f}" for v in s["seed_mean_auc"])
        print(f"{name:<10} mean AUC {np.mean(s['seed_mean_auc']):.4f}  per seed {per_seed}  "
              f"({time.perf_counter() - t0:.0f} s)", flush=True)


if __name__ == "__main__":
    main()
