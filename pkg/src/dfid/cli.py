"""Command-line entry point ``dfid``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric or training
failure, 4 file or IO failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from dfid import detector as det
from dfid import experiment as ex
from dfid import features as ft
from dfid import recon, synth, theory
from dfid.errors import ConfigError, DfidError, NumericError, ShapeError, SplitError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> ex.ExperimentConfig:
    path = getattr(args, "config", None)
    cfg = ex.load_config(path) if path else ex.ExperimentConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(seed,))
    return cfg


def _seed(args, cfg) -> int:
    seed = getattr(args, "seed", None)
    return int(cfg.seeds[0] if seed is None else seed)


def _out(args, default=None) -> Path:
    out = getattr(args, "out", None) or default
    if out is None:
        raise ConfigError("--out is required")
    return Path(out)


def _with(obj, **overrides):
    """dataclasses.replace, skipping overrides left at None."""
    return dataclasses.replace(obj, **{k: v for k, v in overrides.items() if v is not None})


def _write_json(path, obj):
    ex._write_json(path, obj)


def _dataset(path):
    pop, split, manifest = synth.read_dataset(path)
    data = ex._build(synth.DataConfig, manifest["config"], "manifest")
    return pop, split, data, manifest


def _all_samples(split):
    return [s for part in split.parts().values() for s in part]


# --- subcommands ---------------------------------------------------------------


def cmd_theory(args):
    cfg = _config(args)
    t = cfg.theory
    seed = _seed(args, cfg)
    sigma = args.sigma if args.sigma is not None else t.sigma
    u0 = args.u0 if args.u0 is not None else 0.0
    u1 = args.u1 if args.u1 is not None else u0 + sigma
    K = args.k if args.k is not None else t.K
    spec = theory.PopulationSpec(u0=u0, u1=u1, sigma=sigma,
                                 sigma_mu=args.sigma_mu if args.sigma_mu is not None else t.report_sigma_mu,
                                 K=K)
    sign_aware = args.sign_aware or t.sign_aware
    mc_n = args.mc_n if args.mc_n is not None else t.report_mc_n
    rep = theory.theory_report(spec, seed=seed, mc_n=mc_n, sign_aware=sign_aware)
    rows = theory.sweep(t.sigma_mus, t.delta_us, K=K, reps=args.reps or t.reps, seed=seed,
                        sigma=sigma, u0=u0, mc_n=t.mc_n, sign_aware=sign_aware)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "theory_report.json", rep.to_dict())
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(theory.SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in theory.SWEEP_COLUMNS])
    print(json.dumps(ex._clean(rep.to_dict()), indent=2))


def cmd_synth(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    d = cfg.data
    if args.rotation is not None:
        d = dataclasses.replace(d, plan=dataclasses.replace(d.plan, rotation=args.rotation))
    pop = synth.gen_population(d.K, d.D, d.p, seed=ex.stage_seed(seed, "population"))
    samples = synth.generate_samples(pop, d, seed=ex.stage_seed(seed, "samples"))
    split = synth.split_sessions(samples, d.plan)
    out = _out(args)
    synth.write_dataset(out, pop, split, d, seed)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_train_teacher(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    pop, _, data, _ = _dataset(args.dataset)
    pool = synth.gen_pool(pop, data, seed=ex.stage_seed(seed, "pool"))
    tcfg = _with(cfg.teacher, epochs=args.epochs)
    teacher = ft.pretrain_teacher(pool, tcfg, seed=ex.stage_seed(seed, "teacher"))
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    ft.save_teacher(teacher, out)
    print(f"teacher probe accuracy {teacher.accuracy:.4f}")


def cmd_train_recon(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    pop, split, data, _ = _dataset(args.dataset)
    rcfg = _with(cfg.recon, epochs=args.epochs, lr=args.lr)
    samples = split.recon_train
    if args.identity != "all":
        try:
            k = int(args.identity)
        except ValueError:
            raise ConfigError(f"--identity takes an integer or 'all', got {args.identity!r}")
        samples = [s for s in samples if s.identity == k]
        if not samples:
            raise ConfigError(f"no reconstruction samples for identity {k}")
    fp = None if args.no_fingerprint else synth.signature_vector(pop, data.train_family, data.generator)
    ops = recon.train_all(samples, rcfg, seed=ex.stage_seed(seed, "recon"), fingerprint=fp)
    recon.save_operators(ops, _out(args))
    for k, op in ops.items():
        print(f"identity {k}: holdout mse {op.meta['holdout_mse']:.5f}")


def cmd_train_extractor(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    pop, split, data, _ = _dataset(args.dataset)
    teacher = ft.load_teacher(args.teacher)
    dcfg = cfg.distill
    if args.schedule:
        dcfg = dataclasses.replace(dcfg, schedule=ft.parse_schedule(args.schedule))
    elif args.epochs:
        dcfg = dataclasses.replace(dcfg, schedule=ft.split_schedule(args.epochs))
    dcfg = _with(dcfg, m_h=args.mh)
    det_samples = split.detector_train + split.validation
    id_layer = ft.pretrain_identity_layer(det_samples, data.K, dcfg, seed=ex.stage_seed(seed, "identity"))
    pairs = ft.corresponding_pairs([s for s in det_samples
                                    if s.label == synth.AUTHENTIC or s.generator == data.train_family])
    student = ft.train_student(pairs, teacher, id_layer, dcfg, seed=ex.stage_seed(seed, "student"))
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    ft.save_student(student, out)
    for i, h in enumerate(student.history):
        print(f"phase {i}: l12 {h['start']['l12']:.4f} -> {h['end']['l12']:.4f}, "
              f"l3 {h['start']['l3']:.4f} -> {h['end']['l3']:.4f}")


def cmd_extract(args):
    _, split, _, _ = _dataset(args.dataset)
    student = ft.load_student(args.student)
    samples = split.parts()[args.split] if args.split != "all" else _all_samples(split)
    samples = sorted(samples, key=lambda s: s.sort_key)
    feats = ft.extract(student, np.stack([s.x for s in samples])) if samples else np.zeros((0, 0))
    out = _out(args)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "identity", "label"] + [f"f{j}" for j in range(student.feature_dim)])
        for s, f in zip(samples, feats):
            w.writerow([s.sample_id, s.identity, s.label] + [repr(float(v)) for v in f])


def cmd_train_detector(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    _, split, data, _ = _dataset(args.dataset)
    student = ft.load_student(args.student) if args.student else None
    teacher = ft.load_teacher(args.teacher) if args.teacher else None
    ops = recon.load_operators(args.ops)
    dcfg = _with(cfg.detector, m=args.m, folds=args.folds)
    if args.lr_grid:
        dcfg = dataclasses.replace(dcfg, lr_grid=ex.parse_grid(args.lr_grid))
    ext = det.Extractor(student, teacher)
    samples = _all_samples(split)
    out = _out(args)
    summary = []
    for r in range(dcfg.folds):
        fold = synth.split_sessions(samples, dataclasses.replace(data.plan, rotation=r))
        bundle = ex.fit_bundle(fold, ops, ext, data.K, dcfg, data.train_family,
                               ex.stage_seed(seed, "detector") * 10 + r)
        bundle.meta["rotation"] = r
        det.save_bundle(bundle, out / f"fold_{r}")
        summary.append(bundle.meta)
        print(f"fold {r}: lr {bundle.meta['lr']:g}, best epoch {bundle.meta['best_epoch']}, "
              f"validation loss {bundle.meta['best_val']:.5f}")
    _write_json(out / "folds.json", {"folds": summary})


def _open_bundle(path):
    path = Path(path)
    if not (path / "bundle.json").exists() and (path / "fold_0" / "bundle.json").exists():
        path = path / "fold_0"
    return det.load_bundle(path)


def cmd_score(args):
    bundle = _open_bundle(args.bundle)
    samples = synth.read_samples_csv(args.input)
    out = _out(args)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "identity", "label", "score"])
        for s in samples:
            k = s.identity if args.identity is None else args.identity
            w.writerow([s.sample_id, k, s.label, repr(float(det.score(bundle, s.x, k)))])


def cmd_residuals(args):
    pop, split, data, _ = _dataset(args.dataset)
    ops = recon.load_operators(args.ops)
    if args.recon_family != data.train_family:
        old = synth.signature_vector(pop, data.train_family, data.generator)
        new = synth.signature_vector(pop, args.recon_family, data.generator)
        ops = {k: recon.refingerprint(op, old, new) for k, op in ops.items()}
    test = [s for s in split.test if s.label == synth.AUTHENTIC]
    records = []
    for k in sorted({s.identity for s in test}):
        ss = [s for s in test if s.identity == k]
        X = np.stack([s.x for s in ss])
        r_op = ops[k]
        df_op = recon.GeneratorOperator(args.df_family, pop[k], pop, data.generator)
        records += recon.compute_residuals(r_op, ss, processed=df_op(X), family_df=args.df_family)
    out = _out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    recon.write_residuals_csv(records, out)
    table = recon.residual_cdf_stats(records)
    tau = float(np.percentile([r.e0_norm for r in records], 20))
    info = {"cdf": table.to_dict(), "tau": tau,
            "near_idem_fraction": recon.near_idem_fraction(records, tau),
            "df_family": args.df_family, "recon_family": args.recon_family}
    _write_json(out.parent / "residual_cdf.json", info)
    print(f"near-idempotent fraction at tau={tau:.4f}: {info['near_idem_fraction']:.3f}")


def cmd_eval(args):
    cfg = _config(args)
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    out = _out(args)
    report = ex.run_experiment(cfg, out_dir=out, threads=getattr(args, "threads", None) or 1)
    print(format_report(report))


def cmd_report(args):
    path = Path(args.report) if args.report else _out(args) / "report.json"
    report = json.loads(path.read_text())
    if report.get("schema") != ex.SCHEMA:
        raise ConfigError(f"{path}: unsupported report schema {report.get('schema')!r}")
    text = format_report(report)
    print(text)
    (path.parent / "report.txt").write_text(text + "\n")


def format_report(report) -> str:
    lines = [f"mode: {report['mode']}  seeds: {report['seeds']}"]
    if report["mode"] == "theory":
        r = report["theory"]["report"]
        lines.append(f"P_e ind {r['pe_ind_closed']:.6f}  com {r['pe_com_closed']:.6f}  "
                     f"taylor {r['pe_taylor']:.6f}")
        return "\n".join(lines)
    lines.append(f"{'mode':<26}{'mean':>8}{'sd':>8}{'median':>8}{'iqr':>8}{'trim':>8}{'bal.acc':>9}")
    for mode, s in report["summary"].items():
        lines.append(f"{mode:<26}{s['mean']:>8.4f}{s['sd']:>8.4f}{s['median']:>8.4f}"
                     f"{s['iqr']:>8.4f}{s['trimmed_mean']:>8.4f}{s['balanced_accuracy']:>9.4f}")
        fams = s.get("family_mean_auc", {})
        if len(fams) > 1:
            lines.append("  by family: " + ", ".join(f"{f} {v:.4f}" for f, v in fams.items()))
    res = report.get("residuals", {}).get("categories", {})
    for cat, v in res.items():
        lines.append(f"residuals {cat}: near-idempotent {v['near_idem_fraction_mean']:.3f}, "
                     f"median e1/e0 {v['median_ratio_mean']:.3f}")
    return "\n".join(lines)


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for multi-seed runs")

    p = argparse.ArgumentParser(prog="dfid", parents=[common],
                                description="Identity-conditioned near-idempotence deepfake detection.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=fn)
        return sp

    sp = add("theory", cmd_theory, "closed-form and Monte Carlo error probabilities")
    sp.add_argument("--u0", type=float)
    sp.add_argument("--u1", type=float)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--sigma-mu", type=float)
    sp.add_argument("--k", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--mc-n", type=int)
    sp.add_argument("--sign-aware", action="store_true")

    sp = add("synth", cmd_synth, "generate a synthetic dataset")
    sp.add_argument("--rotation", type=int)

    sp = add("train-teacher", cmd_train_teacher, "pretrain the trace teacher")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--epochs", type=int)

    sp = add("train-recon", cmd_train_recon, "train per-identity reconstruction operators")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--identity", default="all")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--no-fingerprint", action="store_true",
                    help="do not stamp the generator-family trace onto the operators")

    sp = add("train-extractor", cmd_train_extractor, "distill the identity-aware student")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--mh", type=float)
    sp.add_argument("--schedule")

    sp = add("extract", cmd_extract, "export student features")
    sp.add_argument("--student", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="all", choices=("all",) + synth.DatasetSplit.PARTS)

    sp = add("train-detector", cmd_train_detector, "train the Siamese detector per fold")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--student")
    sp.add_argument("--teacher")
    sp.add_argument("--ops", required=True)
    sp.add_argument("--m", type=float)
    sp.add_argument("--lr-grid")
    sp.add_argument("--folds", type=int)

    sp = add("score", cmd_score, "score samples with a trained bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--identity", type=int, help="claimed identity (default: each row's own)")

    sp = add("residuals", cmd_residuals, "near-idempotence residuals on the test sessions")
    sp.add_argument("--ops", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--df-family", default="A", choices=synth.FAMILIES)
    sp.add_argument("--recon-family", default="A", choices=synth.FAMILIES)

    sp = add("eval", cmd_eval, "run the full experiment")
    sp.add_argument("--mode", choices=ex.MODES)

    sp = add("report", cmd_report, "summarize an existing report.json")
    sp.add_argument("--report", help="path to report.json (default: OUT/report.json)")
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ex.StageError):
        return exit_code(exc.cause)
    if isinstance(exc, (ConfigError, ShapeError, SplitError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericError, TrainingError, ArithmeticError, DfidError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, ValueError, KeyError)):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (DfidError, ArithmeticError, OSError, ValueError, KeyError) as exc:
        print(f"dfid: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
