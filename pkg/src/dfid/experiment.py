"""Experiment configuration and the end-to-end pipeline behind ``dfid eval``."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from dfid import detector as det
from dfid import features as ft
from dfid import metrics, recon, synth, theory
from dfid.errors import ConfigError, DfidError

MODES = ("proposed", "ablate_idempotence_only", "ablate_idfeatures_only", "mismatch_matrix", "theory")
DETECTION_MODES = MODES[:3]
SCHEMA = 1


@dataclass(frozen=True)
class TheoryConfig:
    sigma_mus: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    delta_us: tuple = (0.5, 1.0, 1.5)
    K: int = 5
    reps: int = 10_000
    sigma: float = 1.0
    mc_n: int = 0  # Monte Carlo draws per sweep cell (0 = closed forms only)
    sign_aware: bool = False
    report_sigma_mu: float = 0.3  # single-draw report at this spread and delta_u = sigma
    report_mc_n: int = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "proposed"
    compare: tuple = ()  # further detection modes evaluated on the same upstream stages
    seeds: tuple = (0,)
    eval_families: tuple = ("A",)  # deepfake families scored in the headline AUC
    data: synth.DataConfig = synth.DataConfig()
    recon: recon.ReconConfig = recon.ReconConfig()
    teacher: ft.TeacherConfig = ft.TeacherConfig()
    distill: ft.DistillConfig = ft.DistillConfig()
    detector: det.DetectorConfig = det.DetectorConfig()
    classifier: det.ClassifierConfig = det.ClassifierConfig()
    theory: TheoryConfig = TheoryConfig()

    def __post_init__(self):
        for m in (self.mode, *self.compare):
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")
        if any(m not in DETECTION_MODES for m in self.compare):
            raise ConfigError("compare lists detection modes only")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        fams = (self.data.train_family, *self.eval_families)
        if any(f not in synth.FAMILIES for f in fams):
            raise ConfigError(f"generator families must be among {synth.FAMILIES}")
        if self.detector.folds < 1 or self.detector.folds > self.data.plan.train + self.data.plan.val:
            raise ConfigError("folds must be between 1 and the number of detector sessions")

    @property
    def modes(self) -> tuple:
        out = [self.mode] + [m for m in self.compare if m != self.mode]
        return tuple(out)


# --- config files ---------------------------------------------------------------


def _build(cls, raw, where):
    if dataclasses.is_dataclass(raw):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        sub = type(default) if dataclasses.is_dataclass(default) else None
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = _tuple(value, name, where)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}")


def _tuple(value, name, where):
    if isinstance(value, str) and name == "schedule":
        return ft.parse_schedule(value)
    if isinstance(value, str) and name == "lr_grid":
        return parse_grid(value)
    if not isinstance(value, (list, tuple)):
        value = [value]
    return tuple(tuple(v) if isinstance(v, list) else v for v in value)


def parse_grid(text: str) -> tuple:
    """'1e-4:1e-3:10' -> 10 evenly spaced values from 1e-4 to 1e-3."""
    try:
        lo, hi, n = text.split(":")
        n = int(n)
        lo, hi = float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}; expected 'lo:hi:n'")
    if n < 1 or not (0 < lo <= hi):
        raise ConfigError(f"bad grid {text!r}")
    return tuple(float(v) for v in np.linspace(lo, hi, n).round(12))


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {}, "config")


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}")
    return config_from_dict(raw or {})


def config_to_dict(cfg) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        return v
    return plain(cfg)


# --- seeds ------------------------------------------------------------------------

_STAGES = ("population", "samples", "pool", "teacher", "recon", "identity", "student",
           "detector", "classifier", "theory")


def stage_seed(master: int, stage: str) -> int:
    """Fixed per-stage seed derived from the master seed."""
    return int(master) * 100 + _STAGES.index(stage)


# --- pipeline stages ------------------------------------------------------------------


class StageError(DfidError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` keeps the original."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DfidError as exc:
        raise StageError(name, exc) from exc


@dataclass
class Upstream:
    """Everything shared by the detection modes for one master seed."""
    seed: int
    population: synth.Population
    samples: list
    ops: dict
    teacher: ft.TeacherNet
    student: ft.StudentNet
    splits: list = field(default_factory=list)  # one DatasetSplit per fold


def build_upstream(cfg: ExperimentConfig, seed: int) -> Upstream:
    d = cfg.data
    pop = _stage("population", synth.gen_population, d.K, d.D, d.p, seed=stage_seed(seed, "population"))
    samples = _stage("samples", synth.generate_samples, pop, d, seed=stage_seed(seed, "samples"))
    pool = _stage("pool", synth.gen_pool, pop, d, seed=stage_seed(seed, "pool"))
    teacher = _stage("teacher", ft.pretrain_teacher, pool, cfg.teacher, seed=stage_seed(seed, "teacher"))
    splits = [_stage("split", synth.split_sessions, samples, dataclasses.replace(d.plan, rotation=r))
              for r in range(cfg.detector.folds)]
    fp = synth.signature_vector(pop, cfg.data.train_family, d.generator)
    ops = _stage("recon", recon.train_all, splits[0].recon_train, cfg.recon,
                 seed=stage_seed(seed, "recon"), fingerprint=fp)
    # the extractor sees every detector session; folds only move validation around
    det_samples = splits[0].detector_train + splits[0].validation
    id_layer = _stage("identity", ft.pretrain_identity_layer, det_samples, d.K, cfg.distill,
                      seed=stage_seed(seed, "identity"))
    pairs = ft.corresponding_pairs([s for s in det_samples
                                    if s.label == synth.AUTHENTIC or s.generator == cfg.data.train_family])
    student = _stage("student", ft.train_student, pairs, teacher, id_layer, cfg.distill,
                     seed=stage_seed(seed, "student"))
    return Upstream(seed, pop, samples, ops, teacher, student, splits)


def extractor_for(mode: str, up: Upstream) -> det.Extractor:
    if mode == "ablate_idempotence_only":
        return det.Extractor(None, up.teacher)
    return det.Extractor(up.student, up.teacher)


def _eval_samples(samples, k, families):
    return [s for s in samples if s.identity == k
            and (s.label == synth.AUTHENTIC or s.generator in families)]


def _val_samples(split, family):
    return [s for s in split.validation if s.label == synth.AUTHENTIC or s.generator == family]


@dataclass
class FoldResult:
    aucs: list  # per identity
    balanced_accuracy: list  # per identity at the validation threshold
    rocs: dict  # identity -> RocCurve
    meta: dict = field(default_factory=dict)
    family_aucs: dict = field(default_factory=dict)  # family -> per-identity AUCs


def calibrate(score_fn, split, K, family) -> dict:
    """Per-identity Youden thresholds on the validation sessions."""
    out = {}
    for k in range(K):
        vs = [s for s in _val_samples(split, family) if s.identity == k]
        out[k] = det.youden_threshold(score_fn(np.stack([s.x for s in vs]), k),
                                      [s.label for s in vs])
    return out


def fit_bundle(split, ops, ext, K, dcfg: det.DetectorConfig, family, seed) -> det.DetectorBundle:
    """Train the Siamese head and decoder on one fold and calibrate thresholds."""
    tr = _stage("pairs", det.build_training_pairs, split.detector_train, ops, ext)
    va = _stage("pairs", det.build_training_pairs, split.validation, ops, ext)
    res = _stage("detector", det.train_detector, tr, va, K, dcfg, seed=seed)
    bundle = det.DetectorBundle(ext, res.decoder, res.head, ops,
                                meta={"lr": res.lr, "best_epoch": res.best_epoch,
                                      "best_val": res.best_val})
    bundle.thresholds = calibrate(lambda X, k: det.score(bundle, X, k), split, K, family)
    return bundle


def run_detection_fold(mode, cfg: ExperimentConfig, up: Upstream, fold: int,
                       families=None) -> tuple[FoldResult, object]:
    split = up.splits[fold]
    K = cfg.data.K
    families = tuple(families or cfg.eval_families)
    seed = stage_seed(up.seed, "detector") * 10 + fold
    ext = extractor_for(mode, up)
    if mode == "ablate_idfeatures_only":
        train = [s for s in split.detector_train
                 if s.label == synth.AUTHENTIC or s.generator == cfg.data.train_family]
        model = _stage("classifier", det.train_feature_classifier, train,
                       _val_samples(split, cfg.data.train_family), ext, cfg.classifier,
                       seed=stage_seed(up.seed, "classifier") * 10 + fold)
        score_fn = lambda X, k: model.score(X)  # noqa: E731
        meta = {"best_epoch": model.best_epoch}
        thresholds = calibrate(score_fn, split, K, cfg.data.train_family)
    else:
        model = fit_bundle(split, up.ops, ext, K, cfg.detector, cfg.data.train_family, seed)
        score_fn = lambda X, k: det.score(model, X, k)  # noqa: E731
        meta = dict(model.meta)
        thresholds = model.thresholds

    aucs, bal, rocs = [], [], {}
    fam_aucs = {f: [] for f in families}
    for k in range(K):
        ss = _eval_samples(split.test, k, families)
        sc = score_fn(np.stack([s.x for s in ss]), k)
        lab = np.array([s.label for s in ss])
        roc = metrics.roc_auc(sc, lab)
        rocs[k] = roc
        aucs.append(roc.auc)
        pred = sc > thresholds[k]
        pos = lab == synth.AUTHENTIC
        bal.append(0.5 * (float(np.mean(pred[pos])) + float(np.mean(~pred[~pos]))))
        gens = np.array([s.generator or "" for s in ss])
        for f in families:
            keep = pos | (gens == f)
            fam_aucs[f].append(metrics.roc_auc(sc[keep], lab[keep]).auc)
    meta["thresholds"] = [thresholds[k] for k in range(K)]
    return FoldResult(aucs, bal, rocs, meta, fam_aucs), model


def run_detection(mode, cfg: ExperimentConfig, up: Upstream, families=None) -> dict:
    runs = [run_detection_fold(mode, cfg, up, r, families) for r in range(cfg.detector.folds)]
    folds = [f for f, _ in runs]
    per_fold = np.array([f.aucs for f in folds])
    out = {
        "identity_auc": [float(v) for v in per_fold.mean(axis=0)],
        "fold_mean_auc": [float(v) for v in per_fold.mean(axis=1)],
        "fold_auc_sd": float(np.std(per_fold.mean(axis=1), ddof=1)) if len(folds) > 1 else 0.0,
        "balanced_accuracy": float(np.mean([f.balanced_accuracy for f in folds])),
        "folds": [f.meta for f in folds],
        "family_auc": {fam: [float(v) for v in np.mean([f.family_aucs[fam] for f in folds], axis=0)]
                       for fam in folds[0].family_aucs},
    }
    out["mean_auc"] = float(np.mean(out["identity_auc"]))
    out["_rocs"] = [f.rocs for f in folds]
    if isinstance(runs[0][1], det.DetectorBundle):
        out["_bundle"] = runs[0][1]
    return out


# --- near-idempotence ---------------------------------------------------------------------


CATEGORIES = (("A", "A"), ("B", "B"), ("B", "A"))  # (deepfake family, reconstruction family)


def family_operators(cfg: ExperimentConfig, up: Upstream, family) -> dict:
    """Per-identity reconstruction operators emulating ``family``.

    The analyst's trained autoencoders carry the training family's trace; the
    other family gets the same autoencoders with its own trace stamped on.
    """
    if family == cfg.data.train_family:
        return up.ops
    gp = cfg.data.generator
    old = synth.signature_vector(up.population, cfg.data.train_family, gp)
    new = synth.signature_vector(up.population, family, gp)
    return {k: recon.refingerprint(op, old, new) for k, op in up.ops.items()}


def residual_report(cfg: ExperimentConfig, up: Upstream, bundle=None) -> dict:
    """e0/e1 statistics for each (deepfake family, reconstruction family) pairing.

    R_recon is the trained per-identity autoencoder carrying the reconstruction
    family's trace; R_df is the deepfake family's generator applied with
    source = target. tau is the 20th percentile of each category's own e0.
    Medians are also given in student-feature space and, when a fold-0
    detector ``bundle`` is passed, in its Siamese output space.
    """
    test_auth = [s for s in up.splits[0].test if s.label == synth.AUTHENTIC]
    out = {}
    student = up.student
    for df_fam, rec_fam in CATEGORIES:
        ops = family_operators(cfg, up, rec_fam)
        records, feat0, feat1, siam0, siam1 = [], [], [], [], []
        swapped = dataclasses.replace(bundle, ops=ops) if bundle is not None else None
        for k in range(cfg.data.K):
            ss = [s for s in test_auth if s.identity == k]
            X = np.stack([s.x for s in ss])
            r_op = ops[k]
            df_op = recon.GeneratorOperator(df_fam, up.population[k], up.population, cfg.data.generator)
            G = df_op(X)
            records += recon.compute_residuals(r_op, ss, processed=G, family_df=df_fam)
            feat0.append(np.linalg.norm(ft.extract(student, r_op(X)) - ft.extract(student, X), axis=1))
            feat1.append(np.linalg.norm(ft.extract(student, r_op(G)) - ft.extract(student, G), axis=1))
            if swapped is not None:
                siam0.append(det.score(swapped, X, k))
                siam1.append(det.score(swapped, G, k))
        e0 = np.array([r.e0_norm for r in records])
        e1 = np.array([r.e1_norm for r in records])
        tau = float(np.percentile(e0, 20))
        table = recon.residual_cdf_stats(records)
        out[f"{df_fam}/{rec_fam}"] = {
            "n": len(records),
            "tau": tau,
            "near_idem_fraction": recon.near_idem_fraction(records, tau),
            "median_e0": float(np.median(e0)),
            "median_e1": float(np.median(e1)),
            "dominance_e1_below_e0": recon.dominance(e1, e0),
            "cdf": table.to_dict(),
            "feature_median_e0": float(np.median(np.concatenate(feat0))),
            "feature_median_e1": float(np.median(np.concatenate(feat1))),
            "_records": records,
        }
        if swapped is not None:
            out[f"{df_fam}/{rec_fam}"]["siamese_median_e0"] = float(np.median(np.concatenate(siam0)))
            out[f"{df_fam}/{rec_fam}"]["siamese_median_e1"] = float(np.median(np.concatenate(siam1)))
    return out


# --- top level ------------------------------------------------------------------------------


def run_theory(cfg: ExperimentConfig, seed: int) -> dict:
    t = cfg.theory
    rows = theory.sweep(t.sigma_mus, t.delta_us, K=t.K, reps=t.reps, seed=stage_seed(seed, "theory"),
                        sigma=t.sigma, mc_n=t.mc_n, sign_aware=t.sign_aware)
    spec = theory.PopulationSpec(u0=0.0, u1=t.sigma, sigma=t.sigma, sigma_mu=t.report_sigma_mu, K=t.K)
    rep = theory.theory_report(spec, seed=stage_seed(seed, "theory"), mc_n=t.report_mc_n,
                               sign_aware=t.sign_aware)
    return {"sweep": rows, "report": rep.to_dict()}


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """All results for one master seed (private keys start with '_')."""
    if cfg.mode == "theory":
        return {"seed": seed, "theory": run_theory(cfg, seed)}
    up = build_upstream(cfg, seed)
    res = {"seed": seed, "teacher_accuracy": up.teacher.accuracy,
           "student_history": up.student.history, "modes": {}}
    modes = [m for m in cfg.modes if m in DETECTION_MODES]
    if cfg.mode == "mismatch_matrix" and "proposed" not in modes:
        modes.insert(0, "proposed")
    for mode in modes:
        fams = synth.FAMILIES if cfg.mode == "mismatch_matrix" and mode == "proposed" else None
        res["modes"][mode] = run_detection(mode, cfg, up, fams)
    res["residuals"] = residual_report(cfg, up, res["modes"].get("proposed", {}).get("_bundle"))
    res["_upstream"] = up
    return res


def _public(obj):
    if isinstance(obj, dict):
        return {k: _public(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_public(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def summarize(cfg: ExperimentConfig, per_seed: list) -> dict:
    report = {"schema": SCHEMA, "mode": cfg.mode, "seeds": list(cfg.seeds),
              "config": config_to_dict(cfg)}
    if cfg.mode == "theory":
        report["theory"] = _public(per_seed[0]["theory"])
        return report
    summary = {}
    modes = list(per_seed[0]["modes"])
    for mode in modes:
        id_auc = np.mean([r["modes"][mode]["identity_auc"] for r in per_seed], axis=0)
        s = metrics.auc_summary(id_auc).to_dict()
        s["seed_mean_auc"] = [r["modes"][mode]["mean_auc"] for r in per_seed]
        s["mean_over_seeds"] = float(np.mean(s["seed_mean_auc"]))
        s["fold_auc_sd"] = [r["modes"][mode]["fold_auc_sd"] for r in per_seed]
        s["balanced_accuracy"] = float(np.mean([r["modes"][mode]["balanced_accuracy"] for r in per_seed]))
        fams = per_seed[0]["modes"][mode]["family_auc"]
        s["family_mean_auc"] = {f: float(np.mean([np.mean(r["modes"][mode]["family_auc"][f])
                                                  for r in per_seed])) for f in fams}
        summary[mode] = s
    report["summary"] = summary
    report["per_seed"] = _public([{k: v for k, v in r.items() if k != "residuals"} for r in per_seed])
    return report


def residual_summary(per_seed: list) -> dict:
    cats = list(per_seed[0]["residuals"])
    out = {"schema": SCHEMA, "categories": {}}
    for c in cats:
        vals = [r["residuals"][c] for r in per_seed]
        out["categories"][c] = {
            "near_idem_fraction_mean": float(np.mean([v["near_idem_fraction"] for v in vals])),
            "median_ratio_mean": float(np.mean([v["median_e1"] / v["median_e0"] for v in vals])),
            "per_seed": _public(vals),
        }
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Run every seed, write the report files into ``out_dir`` (if given) and
    return the report dictionary."""
    if threads > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_seed = list(pool.map(_run_seed_public, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [run_seed(cfg, s) for s in cfg.seeds]
    report = summarize(cfg, per_seed)
    if cfg.mode != "theory":
        report["residuals"] = residual_summary(per_seed)
    if out_dir is not None:
        write_outputs(cfg, report, per_seed, out_dir)
    return report


def _run_seed_public(cfg, seed):
    # worker processes return only picklable, file-relevant pieces
    res = run_seed(cfg, seed)
    res.pop("_upstream", None)
    return res


def write_outputs(cfg: ExperimentConfig, report: dict, per_seed: list, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "theory":
        _write_json(out / "report.json", report)
        rows = report["theory"]["sweep"]
        with open(out / "theory_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(theory.SWEEP_COLUMNS)
            for r in rows:
                w.writerow([repr(float(r[c])) for c in theory.SWEEP_COLUMNS])
        return
    residuals = report.pop("residuals")
    _write_json(out / "report.json", report)
    _write_json(out / "residual_report.json", residuals)
    first = per_seed[0]
    rocs = first["modes"][next(iter(first["modes"]))]["_rocs"]
    for k in range(cfg.data.K):
        with open(out / f"roc_identity_{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "threshold", "fpr", "tpr"])
            for fold, fold_rocs in enumerate(rocs):
                roc = fold_rocs[k]
                for t, x, y in zip(roc.thresholds, roc.fpr, roc.tpr):
                    w.writerow([fold, repr(float(t)), repr(float(x)), repr(float(y))])
    recs = [r for c in first["residuals"].values() for r in c["_records"]]
    recon.write_residuals_csv(recs, out / "residuals.csv")
    up = first.get("_upstream")
    if up is not None:
        test = up.splits[0].test
        feats = det.Extractor(up.student, up.teacher)(np.stack([s.x for s in test]))
        metrics.export_vectors(test, feats, out / "vectors.csv")
    report["residuals"] = residuals


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
