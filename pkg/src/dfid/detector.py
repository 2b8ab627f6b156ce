"""Identity-conditioned Siamese detector built on near-idempotence.

Training pairs come from authentic samples only: (f, R(f)) should land far
apart (label 1) and (R(f), R(R(f))) close together (label 0). At inference a
sample is compared with its own reconstruction under the claimed identity's
operator; a large distance means the sample had not been processed yet.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfid import features, nn, recon
from dfid.errors import ShapeError, TrainingError
from dfid.synth import AUTHENTIC

AUTHENTIC_PAIR, PROCESSED_PAIR = 1, 0


@dataclass
class IdentityDecoder:
    """One-hot identity index -> identity vector (a K x q matrix, no bias)."""
    matrix: np.ndarray

    @property
    def K(self) -> int:
        return self.matrix.shape[0]

    @property
    def q(self) -> int:
        return self.matrix.shape[1]


def decode_identity(decoder: IdentityDecoder, k):
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= decoder.K):
        raise ShapeError(f"identity index out of range [0, {decoder.K})")
    return decoder.matrix[k]


def condition_features(student_feats, teacher_feats, id_vec):
    """[student | teacher | identity] along the last axis."""
    parts = [np.asarray(a, dtype=np.float64) for a in (student_feats, teacher_feats, id_vec)]
    lead = {a.shape[:-1] for a in parts}
    if len(lead) != 1:
        raise ShapeError(f"cannot concatenate parts with shapes {[a.shape for a in parts]}")
    return np.concatenate(parts, axis=-1)


@dataclass
class SiameseHead:
    """Two untied single-layer nets and the contrastive margin."""
    s1: nn.DenseNet
    s2: nn.DenseNet
    m: float = 2.0

    def __post_init__(self):
        if self.s1 is self.s2 or any(
            a is b for a, b in zip(self.s1.all_params(), self.s2.all_params())
        ):
            raise ShapeError("Siamese branches must not share parameters")
        if self.s1.in_dim != self.s2.in_dim or self.s1.out_dim != self.s2.out_dim:
            raise ShapeError("Siamese branches must have matching shapes")

    @property
    def in_dim(self) -> int:
        return self.s1.in_dim


def init_head(in_dim, out_dim=16, m=2.0, activation="linear", seed=0,
              mirrored=True) -> SiameseHead:
    """Two branches; with ``mirrored`` they start from equal values held in
    separate arrays, so the initial distance depends only on the change between
    the two inputs. Training then moves them apart."""
    rng = np.random.default_rng(seed)
    s1 = nn.init_net([in_dim, out_dim], [activation], rng)
    s2 = s1.copy() if mirrored else nn.init_net([in_dim, out_dim], [activation], rng)
    return SiameseHead(s1, s2, m)


def siamese_distance(head: SiameseHead, X1, X2):
    """|S_n1(X1) - S_n2(X2)|; a float for single vectors, an array for rows."""
    X1, X2 = np.asarray(X1, float), np.asarray(X2, float)
    if X1.shape != X2.shape:
        raise ShapeError(f"length mismatch {X1.shape} vs {X2.shape}")
    d = np.linalg.norm(nn.forward(head.s1, X1) - nn.forward(head.s2, X2), axis=-1)
    return float(d) if d.ndim == 0 else d


# --- features of raw samples --------------------------------------------------


@dataclass
class Extractor:
    """Frozen per-sample features fed to the head: [student | teacher].

    Either side may be None (ablations), in which case it contributes nothing.
    """
    student: object = None
    teacher: object = None

    def parts(self, X):
        """(student features, teacher features), empty columns for a missing side."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        empty = np.zeros((len(X), 0))
        s = empty if self.student is None else nn.forward(self.student.net, X)
        t = empty if self.teacher is None else self.teacher.features(X)
        return s, t

    @property
    def dim(self) -> int:
        return ((0 if self.student is None else self.student.net.out_dim)
                + (0 if self.teacher is None else self.teacher.feature_dim))

    def __call__(self, X):
        return np.concatenate(self.parts(X), axis=1)


@dataclass
class PairSet:
    """Precomputed extractor features for pairs: rows of (A1, A2, identity, Y)."""
    A1: np.ndarray
    A2: np.ndarray
    identity: np.ndarray
    Y: np.ndarray

    def __len__(self):
        return len(self.Y)


def build_training_pairs(samples, ops, extractor: Extractor) -> PairSet:
    """(f, R f) with Y=1 and (R f, R R f) with Y=0 for each authentic sample."""
    auth = [s for s in samples if s.label == AUTHENTIC]
    if not auth:
        raise ShapeError("need authentic samples to build pairs")
    by_id: dict = {}
    for s in auth:
        by_id.setdefault(s.identity, []).append(s.x)
    A1, A2, ids, Y = [], [], [], []
    for k in sorted(by_id):
        if k not in ops:
            raise ShapeError(f"no reconstruction operator for identity {k}")
        X = np.stack(by_id[k])
        RX = ops[k](X)
        RRX = ops[k](RX)
        F0, F1, F2 = extractor(X), extractor(RX), extractor(RRX)
        A1 += [F0, F1]
        A2 += [F1, F2]
        ids.append(np.full(2 * len(X), k))
        Y += [np.full(len(X), AUTHENTIC_PAIR), np.full(len(X), PROCESSED_PAIR)]
    return PairSet(np.concatenate(A1), np.concatenate(A2), np.concatenate(ids),
                   np.concatenate(Y).astype(np.float64))


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class DetectorConfig:
    q: int = 8  # identity vector length; 0 disables identity conditioning
    s: int = 16  # Siamese output length
    m: float = 2.0
    activation: str = "linear"
    lr_grid: tuple = tuple(np.linspace(1e-4, 1e-3, 10).round(12))
    epochs: int = 200
    batch_size: int = 128
    folds: int = 4
    mirrored_init: bool = True


def contrastive_forward(head, decoder, P: PairSet, idx):
    """Per-pair distances with everything needed for the backward pass."""
    idv = decoder.matrix[P.identity[idx]] if decoder.q else np.zeros((len(idx), 0))
    X1 = np.concatenate([P.A1[idx], idv], axis=1)
    X2 = np.concatenate([P.A2[idx], idv], axis=1)
    o1, c1 = nn.forward_cache(head.s1, X1)
    o2, c2 = nn.forward_cache(head.s2, X2)
    diff = o1 - o2
    d = np.sqrt(np.sum(diff * diff, axis=1))
    return d, (diff, c1, c2)


def contrastive_batch(head, decoder, P: PairSet, idx):
    """Mean contrastive loss over ``idx`` and gradients for [s1, s2, decoder]."""
    d, (diff, c1, c2) = contrastive_forward(head, decoder, P, idx)
    y = P.Y[idx]
    n = len(idx)
    loss = float(np.mean(nn.contrastive_loss(d, y, head.m)))
    gd = nn.contrastive_loss_grad(d, y, head.m) / n
    unit = np.divide(diff, d[:, None], out=np.zeros_like(diff), where=d[:, None] > 0)
    # at d = 0 the Y=0 term has zero gradient and the Y=1 term has no direction
    g1, gx1 = nn.backward(head.s1, c1, gd[:, None] * unit)
    g2, gx2 = nn.backward(head.s2, c2, -gd[:, None] * unit)
    grads = nn.flat_grads(head.s1, g1) + nn.flat_grads(head.s2, g2)
    g_dec = np.zeros_like(decoder.matrix)
    if decoder.q:
        q = decoder.q
        np.add.at(g_dec, P.identity[idx], gx1[:, -q:] + gx2[:, -q:])
    return loss, grads + [g_dec]


def pair_loss(head, decoder, P: PairSet) -> float:
    return contrastive_batch(head, decoder, P, np.arange(len(P)))[0]


def _params(head, decoder):
    return head.s1.params() + head.s2.params() + [decoder.matrix]


@dataclass
class TrainResult:
    head: SiameseHead
    decoder: IdentityDecoder
    lr: float
    best_epoch: int
    val_curve: list = field(default_factory=list)  # validation loss after each epoch
    best_val: float = float("inf")


def train_detector(train: PairSet, val: PairSet, K, cfg: DetectorConfig = DetectorConfig(),
                   lr=None, seed=0) -> TrainResult:
    """Adam on the contrastive loss; the checkpoint with the lowest validation
    loss is kept. Without ``lr`` every value in ``cfg.lr_grid`` is tried and the
    best validation loss wins."""
    if len(train) < 100:
        raise ShapeError(f"need at least 100 training pairs, got {len(train)}")
    if lr is None:
        runs = train_detector_grid(train, val, K, cfg, seed=seed)
        return min(runs, key=lambda r: r.best_val)
    rng = np.random.default_rng(seed)
    head, decoder = _init(train, K, cfg, rng)
    params = _params(head, decoder)
    opt = nn.OptimizerState("adam", lr=float(lr))
    best = (pair_loss(head, decoder, val), 0, _snapshot(head, decoder))
    curve = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        for b in range(0, len(train), cfg.batch_size):
            try:
                loss, grads = contrastive_batch(head, decoder, train, perm[b:b + cfg.batch_size])
            except ArithmeticError as exc:
                raise TrainingError(f"detector training diverged at epoch {epoch}: {exc}")
            if not np.isfinite(loss):
                raise TrainingError(f"detector loss is NaN at epoch {epoch}")
            nn.step(params, grads, opt)
        v = pair_loss(head, decoder, val)
        curve.append(v)
        if v < best[0]:
            best = (v, epoch + 1, _snapshot(head, decoder))
    head, decoder = best[2]
    return TrainResult(head, decoder, float(lr), best[1], curve, best[0])


def _init(train: PairSet, K, cfg: DetectorConfig, rng):
    in_dim = train.A1.shape[1] + cfg.q
    head = init_head(in_dim, cfg.s, cfg.m, cfg.activation, seed=rng.integers(2**31),
                     mirrored=cfg.mirrored_init)
    limit = np.sqrt(6.0 / (K + max(cfg.q, 1)))
    return head, IdentityDecoder(rng.uniform(-limit, limit, size=(K, cfg.q)))


def train_detector_grid(train: PairSet, val: PairSet, K, cfg: DetectorConfig = DetectorConfig(),
                        seed=0) -> list[TrainResult]:
    """train_detector for every learning rate in ``cfg.lr_grid`` at once.

    All runs share the initialization and minibatch order, exactly as separate
    calls with the same seed would, so the parameters are simply stacked along
    a leading grid axis and updated together.
    """
    if len(train) < 100:
        raise ShapeError(f"need at least 100 training pairs, got {len(train)}")
    lrs = np.asarray(cfg.lr_grid, dtype=np.float64)
    G = len(lrs)
    rng = np.random.default_rng(seed)
    head, decoder = _init(train, K, cfg, rng)
    params = [np.repeat(p[None], G, axis=0) for p in _params(head, decoder)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    onehot_tr = np.eye(K)[train.identity]

    best_val = _grid_loss(params, val, np.arange(len(val)), np.eye(K)[val.identity], cfg)[0]
    best = [np.array(p) for p in params]
    best_epoch = np.zeros(G, dtype=int)
    curves = []
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        for b in range(0, len(train), cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            loss, grads = _grid_loss(params, train, idx, onehot_tr[idx], cfg, grad=True)
            if not np.all(np.isfinite(loss)):
                raise TrainingError(f"detector loss is NaN at epoch {epoch}")
            t += 1
            c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
            for p, g, mm, vv in zip(params, grads, m, v):
                mm *= beta1
                mm += (1.0 - beta1) * g
                vv *= beta2
                vv += (1.0 - beta2) * g * g
                lr = lrs.reshape((G,) + (1,) * (p.ndim - 1))
                p -= lr * (mm / c1) / (np.sqrt(vv / c2) + eps)
        vl = _grid_loss(params, val, np.arange(len(val)), np.eye(K)[val.identity], cfg)[0]
        curves.append(vl)
        better = vl < best_val
        best_val = np.where(better, vl, best_val)
        best_epoch = np.where(better, epoch + 1, best_epoch)
        for bp, p in zip(best, params):
            bp[better] = p[better]
    out = []
    for g in range(G):
        w1, b1, w2, b2, dec = (bp[g].copy() for bp in best)
        h = SiameseHead(nn.DenseNet([nn.Layer(w1, b1, cfg.activation)]),
                        nn.DenseNet([nn.Layer(w2, b2, cfg.activation)]), cfg.m)
        out.append(TrainResult(h, IdentityDecoder(dec), float(lrs[g]), int(best_epoch[g]),
                               [float(c[g]) for c in curves], float(best_val[g])))
    return out


def _act(z, activation):
    if activation == "linear":
        return z, None
    if activation == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    return np.maximum(z, 0.0), (z > 0).astype(np.float64)


def _grid_loss(params, P: PairSet, idx, onehot, cfg: DetectorConfig, grad=False):
    """Contrastive loss per grid entry (and gradients) for stacked single-layer heads.

    Weights are split into the feature block and the identity block so the
    conditioned inputs never have to be materialized per grid entry.
    """
    W1, b1, W2, b2, dec = params
    a = P.A1.shape[1]
    n = len(idx)
    A1, A2 = P.A1[idx], P.A2[idx]
    idv = onehot @ dec  # (G, n, q)
    z1 = A1 @ W1[:, :, :a].transpose(0, 2, 1) + b1[:, None, :]
    z2 = A2 @ W2[:, :, :a].transpose(0, 2, 1) + b2[:, None, :]
    if dec.shape[2]:
        z1 += idv @ W1[:, :, a:].transpose(0, 2, 1)
        z2 += idv @ W2[:, :, a:].transpose(0, 2, 1)
    o1, da1 = _act(z1, cfg.activation)
    o2, da2 = _act(z2, cfg.activation)
    diff = o1 - o2
    d = np.sqrt(np.einsum("gns,gns->gn", diff, diff))
    y = P.Y[idx]
    loss = np.mean(nn.contrastive_loss(d, y, cfg.m), axis=1)
    if not grad:
        return loss, None
    gd = nn.contrastive_loss_grad(d, y, cfg.m) / n
    scale = np.divide(gd, d, out=np.zeros_like(d), where=d > 0)[..., None]
    gz1 = scale * diff
    gz2 = -gz1
    if da1 is not None:
        gz1 = gz1 * da1
        gz2 = gz2 * da2
    t1, t2 = gz1.transpose(0, 2, 1), gz2.transpose(0, 2, 1)
    gW1, gW2 = t1 @ A1, t2 @ A2
    if dec.shape[2]:
        gW1 = np.concatenate([gW1, t1 @ idv], axis=2)
        gW2 = np.concatenate([gW2, t2 @ idv], axis=2)
        g_id = gz1 @ W1[:, :, a:] + gz2 @ W2[:, :, a:]
        g_dec = onehot.T @ g_id
    else:
        g_dec = np.zeros_like(dec)
    return loss, [gW1, gz1.sum(axis=1), gW2, gz2.sum(axis=1), g_dec]


def _snapshot(head, decoder):
    return (SiameseHead(head.s1.copy(), head.s2.copy(), head.m),
            IdentityDecoder(decoder.matrix.copy()))


# --- inference ------------------------------------------------------------------


@dataclass
class DetectorBundle:
    extractor: Extractor
    decoder: IdentityDecoder
    head: SiameseHead
    ops: dict  # identity -> reconstruction operator
    thresholds: dict = field(default_factory=dict)  # identity -> theta
    meta: dict = field(default_factory=dict)


def score(bundle: DetectorBundle, f, k):
    """D_Sn between the conditioned features of f and of R_k(f).

    ``f`` may be one vector or rows that all claim identity ``k``.
    """
    if k not in bundle.ops:
        raise ShapeError(f"unknown identity {k}")
    f = np.asarray(f, dtype=np.float64)
    X = np.atleast_2d(f)
    RX = bundle.ops[k](X)
    idv = decode_identity(bundle.decoder, np.full(len(X), k)) if bundle.decoder.q else np.zeros((len(X), 0))
    X1 = condition_features(*bundle.extractor.parts(X), idv)
    X2 = condition_features(*bundle.extractor.parts(RX), idv)
    d = siamese_distance(bundle.head, X1, X2)
    return float(d[0]) if f.ndim == 1 else d


def classify(bundle: DetectorBundle, f, k, theta=None):
    """'authentic' when the score exceeds theta (per-identity default)."""
    if theta is None:
        theta = bundle.thresholds[k]
    s = score(bundle, f, k)
    if np.ndim(s) == 0:
        return "authentic" if s > theta else "deepfake"
    return np.where(s > theta, "authentic", "deepfake")


def youden_threshold(scores, labels) -> float:
    """Threshold maximizing TPR - FPR, placed midway between neighboring scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = labels == AUTHENTIC, labels != AUTHENTIC
    if not pos.any() or not neg.any():
        raise ShapeError("calibration needs both classes")
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    tpr = (scores[pos][None, :] > cands[:, None]).mean(axis=1)
    fpr = (scores[neg][None, :] > cands[:, None]).mean(axis=1)
    return float(cands[int(np.argmax(tpr - fpr))])


# --- feature-only baseline ---------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 16
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128


@dataclass
class FeatureClassifier:
    """Feedforward authentic-vs-deepfake classifier on extractor features."""
    extractor: Extractor
    net: nn.DenseNet
    best_epoch: int = 0

    def score(self, X):
        return nn.forward(self.net, self.extractor(X))[:, 0]


def train_feature_classifier(train_samples, val_samples, extractor: Extractor,
                             cfg: ClassifierConfig = ClassifierConfig(), seed=0) -> FeatureClassifier:
    """MSE on labels (1 authentic, 0 deepfake); lowest validation loss is kept."""
    def arrays(samples):
        X = np.stack([s.x for s in samples])
        return extractor(X), np.array([[float(s.label)] for s in samples])

    Ftr, ytr = arrays(train_samples)
    Fva, yva = arrays(val_samples)
    if len(np.unique(ytr)) < 2:
        raise ShapeError("classifier training needs both classes")
    rng = np.random.default_rng(seed)
    net = nn.init_net([Ftr.shape[1], cfg.hidden, 1], ["tanh", "linear"], rng)
    opt = nn.OptimizerState("adam", lr=cfg.lr)
    best = (nn.loss_value(net, nn.mse_tail, nn.Batch(Fva, yva)), 0, net.copy())
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(Ftr))
        for b in range(0, len(Ftr), cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            try:
                _, grads = nn.backprop_grads(net, nn.mse_tail, nn.Batch(Ftr[idx], ytr[idx]))
            except ArithmeticError as exc:
                raise TrainingError(f"classifier training diverged at epoch {epoch}: {exc}")
            nn.step(net.params(), grads, opt)
        v = nn.loss_value(net, nn.mse_tail, nn.Batch(Fva, yva))
        if v < best[0]:
            best = (v, epoch + 1, net.copy())
    return FeatureClassifier(extractor, best[2], best[1])


# --- files ------------------------------------------------------------------------


def save_bundle(bundle: DetectorBundle, out_dir):
    """Write a self-contained bundle directory (extractor, operators, head, decoder)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = bundle.extractor
    if ext.student is not None:
        features.save_student(ext.student, out / "student.ckpt")
    if ext.teacher is not None:
        features.save_teacher(ext.teacher, out / "teacher.ckpt")
    recon.save_operators(bundle.ops, out / "ops")
    nn.save_net(bundle.head.s1.copy(), out / "s1.ckpt")
    nn.save_net(bundle.head.s2.copy(), out / "s2.ckpt")
    index = {
        "margin": bundle.head.m,
        "decoder": bundle.decoder.matrix.tolist(),
        "thresholds": {str(k): float(v) for k, v in sorted(bundle.thresholds.items())},
        "meta": bundle.meta,
        "student": ext.student is not None,
        "teacher": ext.teacher is not None,
    }
    (out / "bundle.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_bundle(out_dir) -> DetectorBundle:
    out = Path(out_dir)
    index = json.loads((out / "bundle.json").read_text())
    ext = Extractor(features.load_student(out / "student.ckpt") if index["student"] else None,
                    features.load_teacher(out / "teacher.ckpt") if index["teacher"] else None)
    head = SiameseHead(nn.load_net(out / "s1.ckpt"), nn.load_net(out / "s2.ckpt"),
                       float(index["margin"]))
    K = len(index["decoder"])
    decoder = IdentityDecoder(np.array(index["decoder"], dtype=np.float64).reshape(K, -1))
    return DetectorBundle(ext, decoder, head, recon.load_operators(out / "ops"),
                          {int(k): float(v) for k, v in index["thresholds"].items()},
                          index["meta"])
