"""ROC/AUC, per-identity summary statistics and feature export."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from dfid.errors import MetricError
from dfid.synth import AUTHENTIC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score cut producing each point (score > threshold -> authentic)
    auc: float


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if np.any(np.isnan(scores)):
        raise MetricError("scores contain NaN")
    pos, neg = scores[labels == AUTHENTIC], scores[labels != AUTHENTIC]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both authentic and deepfake samples")
    return pos, neg


def auc_pairs(pos, neg) -> float:
    """Fraction of (pos, neg) pairs with pos ranked higher; ties count 1/2."""
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    pos = np.asarray(pos, dtype=np.float64)
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    wins = float(below.sum()) + 0.5 * float((at_or_below - below).sum())
    return wins / (len(pos) * len(neg))


def roc_auc(scores, labels) -> RocCurve:
    """ROC of the rule 'authentic when score > t' with its Mann-Whitney AUC."""
    pos, neg = _split(scores, labels)
    cuts = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    # points for t = +inf, then each distinct score from the top (score >= t)
    tp = len(pos) - np.searchsorted(pos_s, cuts, side="left")
    fp = len(neg) - np.searchsorted(neg_s, cuts, side="left")
    fpr = np.concatenate([[0.0], fp / len(neg)])
    tpr = np.concatenate([[0.0], tp / len(pos)])
    thresholds = np.concatenate([[np.inf], cuts])
    return RocCurve(fpr, tpr, thresholds, auc_pairs(pos, neg))


@dataclass
class AucSummary:
    aucs: list
    mean: float
    sd: float
    median: float
    iqr: float
    trimmed_mean: float
    n_trimmed_per_tail: int

    def to_dict(self):
        return asdict(self)


def trimmed_mean(values, trim_total=0.10) -> tuple[float, int]:
    """Mean after dropping floor(trim_total * n / 2) values from each tail."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    cut = int(math.floor(trim_total * len(v) / 2 + 1e-12))
    kept = v[cut:len(v) - cut]
    return float(np.mean(kept)), cut


def auc_summary(aucs, trim_total=0.10) -> AucSummary:
    a = np.asarray(aucs, dtype=np.float64)
    if len(a) < 2:
        raise MetricError("summary needs at least two identities")
    q1, med, q3 = np.percentile(a, [25, 50, 75])  # linear interpolation (type 7)
    tm, cut = trimmed_mean(a, trim_total)
    return AucSummary([float(x) for x in a], float(a.mean()), float(a.std(ddof=1)),
                      float(med), float(q3 - q1), tm, cut)


VECTOR_META = ("sample_id", "identity", "session", "label", "generator")


def export_vectors(samples, features, path):
    """CSV of sample metadata and feature columns, rows ordered by
    (identity, session, index)."""
    features = np.asarray(features, dtype=np.float64)
    if len(samples) != len(features):
        raise MetricError("one feature row per sample is required")
    width = features.shape[1] if features.ndim == 2 and len(features) else 0
    order = sorted(range(len(samples)), key=lambda i: samples[i].sort_key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(VECTOR_META) + [f"f{j}" for j in range(width)])
        for i in order:
            s = samples[i]
            w.writerow([s.sample_id, s.identity, s.session, s.label, s.generator or ""]
                       + [repr(float(v)) for v in features[i]])


def read_vectors(path):
    """(metadata rows, feature matrix) from an export_vectors file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_meta = len(VECTOR_META)
    meta = [dict(zip(header[:n_meta], r[:n_meta])) for r in body]
    feats = np.array([[float(v) for v in r[n_meta:]] for r in body]).reshape(
        len(body), len(header) - n_meta)
    return meta, feats
