"""Identity-aware feature extractor trained by teacher-student distillation.

The teacher is a small trace classifier pretrained on a separate pool; its
penultimate layer is the trace feature. The student keeps a frozen first layer
taken from an identity-classification pass and learns a tunable head that
(phase 1) imitates the teacher through a fixed random adapter and (phase 2)
pushes each authentic sample away from its corresponding deepfake.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfid import nn
from dfid.errors import ConfigError, ShapeError, TrainingError
from dfid.synth import AUTHENTIC, DEEPFAKE, stack


# --- teacher ------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherConfig:
    hidden: int = 32
    features: int = 16  # penultimate width, T_f
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    holdout: float = 0.2
    min_accuracy: float = 0.90


@dataclass
class TeacherNet:
    """A frozen trace classifier. ``net`` ends in a one-unit score head."""
    net: nn.DenseNet
    accuracy: float = float("nan")

    def __post_init__(self):
        self.net.frozen_prefix_len = len(self.net.layers)
        for p in self.net.all_params():
            p.setflags(write=False)

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    @property
    def feature_dim(self) -> int:
        return self.net.layers[-2].out_dim

    def features(self, X):
        return penultimate(self.net, X)


def penultimate(net: nn.DenseNet, X):
    return nn.forward(nn.DenseNet(net.layers[:-1]), X)


def linear_probe_accuracy(F_train, y_train, F_test, y_test, ridge=1e-6) -> float:
    """Held-out accuracy of a least-squares one-vs-rest linear classifier."""
    classes = np.unique(y_train)
    A = np.hstack([F_train, np.ones((len(F_train), 1))])
    T = (y_train[:, None] == classes[None, :]).astype(np.float64)
    W = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ T)
    B = np.hstack([F_test, np.ones((len(F_test), 1))])
    pred = classes[np.argmax(B @ W, axis=1)]
    return float(np.mean(pred == y_test))


def _fit(net, X, Y, epochs, lr, batch_size, rng, what):
    opt = nn.OptimizerState("adam", lr=lr)
    for epoch in range(epochs):
        perm = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = perm[start:start + batch_size]
            try:
                loss, grads = nn.backprop_grads(net, nn.mse_tail, nn.Batch(X[idx], Y[idx]))
            except ArithmeticError as exc:
                raise TrainingError(f"{what} diverged at epoch {epoch}: {exc}")
            nn.step(net.params(), grads, opt)
    return net


def pretrain_teacher(pool, cfg: TeacherConfig = TeacherConfig(), seed=0) -> TeacherNet:
    """Train a trace classifier (MSE on +-1 targets) and freeze it.

    Raises TrainingError when a linear probe on the penultimate features misses
    ``cfg.min_accuracy`` on the held-out part of the pool.
    """
    X, _, y, _ = stack(pool)
    n_auth = int(np.sum(y == AUTHENTIC))
    n_df = int(np.sum(y == DEEPFAKE))
    if n_auth == 0 or n_df == 0:
        raise ShapeError("teacher pool needs both authentic and deepfake samples")
    if abs(n_auth - n_df) > 0.1 * max(n_auth, n_df):
        raise ShapeError(f"teacher pool unbalanced: {n_auth} authentic vs {n_df} deepfake")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    n_hold = max(2, int(round(cfg.holdout * len(X))))
    hold, train = order[:n_hold], order[n_hold:]
    target = np.where(y == AUTHENTIC, 1.0, -1.0)[:, None]
    net = nn.init_net([X.shape[1], cfg.hidden, cfg.features, 1], ["tanh", "tanh", "linear"], rng)
    _fit(net, X[train], target[train], cfg.epochs, cfg.lr, cfg.batch_size, rng, "teacher pretraining")
    F = penultimate(net, X)
    acc = linear_probe_accuracy(F[train], y[train], F[hold], y[hold])
    if acc < cfg.min_accuracy:
        raise TrainingError(
            f"teacher pretraining failed: held-out probe accuracy {acc:.3f} < {cfg.min_accuracy}"
        )
    return TeacherNet(net, acc)


# --- student ------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    hidden: int = 96  # width of the frozen identity layer
    tail: int = 0  # optional tunable tanh layer before the head (0 = none)
    features: int = 16  # F
    id_epochs: int = 10
    id_lr: float = 1e-3
    schedule: tuple = ((150, 1.0, 0.0), (150, 0.0, 1.0))  # (epochs, alpha, beta)
    m_h: float = 5.0
    lr: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 64
    adapter_seed: int = 12345

    def __post_init__(self):
        if not self.m_h > 0:
            raise ConfigError("m_h must be positive")
        if not self.schedule:
            raise ConfigError("schedule needs at least one phase")
        for phase in self.schedule:
            if len(phase) != 3:
                raise ConfigError("schedule phases are (epochs, alpha, beta)")
            epochs, a, b = phase
            if int(epochs) < 0 or not (0 <= a <= 1 and 0 <= b <= 1):
                raise ConfigError(f"bad schedule phase {phase}")

    @property
    def epochs(self) -> int:
        return sum(int(p[0]) for p in self.schedule)


def parse_schedule(text: str) -> tuple:
    """'150:1,0;150:0,1' -> ((150, 1.0, 0.0), (150, 0.0, 1.0))."""
    try:
        phases = []
        for part in text.split(";"):
            epochs, weights = part.split(":")
            a, b = weights.split(",")
            phases.append((int(epochs), float(a), float(b)))
    except ValueError:
        raise ConfigError(f"cannot parse schedule {text!r}; expected 'E:a,b;E:a,b'")
    return tuple(phases)


def split_schedule(total_epochs: int) -> tuple:
    """Default two-phase schedule: (1, 0) for the first half, (0, 1) after."""
    half = total_epochs // 2
    return ((half, 1.0, 0.0), (total_epochs - half, 0.0, 1.0))


@dataclass
class StudentNet:
    """Frozen identity layer followed by the trainable head.

    ``adapter`` (F x T_f) is the fixed map that brings teacher features to the
    student's width for the imitation losses.
    """
    net: nn.DenseNet
    adapter: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.net.frozen_prefix_len < 1:
            raise ShapeError("student needs a frozen prefix")
        if self.adapter.shape[0] != self.net.out_dim:
            raise ConfigError(
                f"adapter maps to {self.adapter.shape[0]} features, student emits {self.net.out_dim}"
            )

    @property
    def feature_dim(self) -> int:
        return self.net.out_dim


def extract(student: StudentNet, f):
    return nn.forward(student.net, f)


def teacher_targets(teacher: TeacherNet, adapter, X):
    """Teacher features mapped to the student's width."""
    T = teacher.features(X)
    if T.shape[-1] != adapter.shape[1]:
        raise ConfigError(f"adapter expects {adapter.shape[1]} teacher features, got {T.shape[-1]}")
    return T @ adapter.T


def make_adapter(teacher_dim, student_dim, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((student_dim, teacher_dim)) / np.sqrt(teacher_dim)


def pretrain_identity_layer(samples, K, cfg: DistillConfig = DistillConfig(), seed=0) -> nn.Layer:
    """First layer of an identity classifier (MSE on one-hot targets).

    Training runs on standardized inputs and the standardization is folded into
    the returned layer, so it applies to raw vectors. The pass is kept short:
    longer training saturates the tanh units and erases the small-scale
    structure that carries generator traces.
    """
    X, ident, _, _ = stack([s for s in samples if s.label == AUTHENTIC])
    if len(X) == 0:
        raise ShapeError("identity pretraining needs authentic samples")
    center, scale = X.mean(axis=0), float(max(X.std(), 1e-8))
    rng = np.random.default_rng(seed)
    net = nn.init_net([X.shape[1], cfg.hidden, K], ["tanh", "linear"], rng)
    _fit(net, (X - center) / scale, np.eye(K)[ident], cfg.id_epochs, cfg.id_lr,
         cfg.batch_size, rng, "identity pretraining")
    W = net.layers[0].weight / scale
    return nn.Layer(W, net.layers[0].bias - W @ center, "tanh")


def distill_losses(teacher_out, student_auth, student_df, teacher_df, m_h):
    """Per-pair (L1, L2, L3) from precomputed features.

    ``teacher_out`` / ``teacher_df`` are adapter-mapped teacher features of the
    authentic and deepfake inputs. Inputs may be single vectors or (n, F) rows.
    """
    sa, sd = np.asarray(student_auth, float), np.asarray(student_df, float)
    ta, td = np.asarray(teacher_out, float), np.asarray(teacher_df, float)
    if not (sa.shape == sd.shape == ta.shape == td.shape):
        raise ConfigError(f"feature length mismatch {ta.shape} {sa.shape} {td.shape} {sd.shape}")
    l1 = np.sum((ta - sa) ** 2, axis=-1)
    l2 = np.sum((td - sd) ** 2, axis=-1)
    dist = np.sqrt(np.sum((sa - sd) ** 2, axis=-1))
    l3 = nn.hinge_sq_loss(dist, m_h)
    return l1, l2, np.asarray(l3)


def pair_losses(teacher: TeacherNet, student: StudentNet, f_auth, f_df, m_h):
    """(L1, L2, L3) for one pair of raw inputs (or row-aligned batches)."""
    return tuple(
        float(v) if np.ndim(v) == 0 else v
        for v in distill_losses(
            teacher_targets(teacher, student.adapter, f_auth), extract(student, f_auth),
            extract(student, f_df), teacher_targets(teacher, student.adapter, f_df), m_h,
        )
    )


def composite_loss_and_grads(student: StudentNet, Xa, Xd, Ta, Td, alpha, beta, m_h):
    """Batch mean of alpha(L1 + L2) + beta L3 and its gradient for the student head."""
    n = len(Xa)
    sa, cache_a = nn.forward_cache(student.net, Xa)
    sd, cache_d = nn.forward_cache(student.net, Xd)
    l1, l2, l3 = distill_losses(Ta, sa, sd, Td, m_h)
    loss = float(np.mean(alpha * (l1 + l2) + beta * l3))
    diff = sa - sd
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    # d/d dist of the hinge, chained through dist = |sa - sd|; zero when dist = 0
    h = nn.hinge_sq_loss_grad(dist, m_h)
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    g_a = (alpha * 2.0 * (sa - Ta) + beta * h[:, None] * unit) / n
    g_d = (alpha * 2.0 * (sd - Td) - beta * h[:, None] * unit) / n
    grads_a, _ = nn.backward(student.net, cache_a, g_a)
    grads_d, _ = nn.backward(student.net, cache_d, g_d)
    flat = [ga + gd for ga, gd in zip(nn.flat_grads(student.net, grads_a),
                                      nn.flat_grads(student.net, grads_d))]
    return loss, flat


def corresponding_pairs(samples):
    """Row-aligned (authentic, deepfake) arrays with the same target identity,
    session and frame."""
    auth = {(s.identity, s.session, s.index): s.x for s in samples if s.label == AUTHENTIC}
    keys, fa, fd = [], [], []
    for s in sorted(samples, key=lambda s: s.sort_key):
        key = (s.identity, s.session, s.index)
        if s.label == DEEPFAKE and key in auth:
            keys.append(key)
            fa.append(auth[key])
            fd.append(s.x)
    if not keys:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.stack(fa), np.stack(fd)


def init_student(id_layer: nn.Layer, teacher: TeacherNet, cfg: DistillConfig, seed=0) -> StudentNet:
    rng = np.random.default_rng(seed)
    frozen = nn.Layer(id_layer.weight.copy(), id_layer.bias.copy(), id_layer.activation)
    if cfg.tail:
        rest = nn.init_net([id_layer.out_dim, cfg.tail, cfg.features], ["tanh", "linear"], rng).layers
    else:
        rest = nn.init_net([id_layer.out_dim, cfg.features], ["linear"], rng).layers
    net = nn.DenseNet([frozen, *rest], frozen_prefix_len=1)
    return StudentNet(net, make_adapter(teacher.feature_dim, cfg.features, cfg.adapter_seed))


def train_student(pairs, teacher: TeacherNet, id_layer: nn.Layer,
                  cfg: DistillConfig = DistillConfig(), seed=0) -> StudentNet:
    """Run the (alpha, beta) schedule over corresponding (authentic, deepfake) pairs.

    ``history`` gets one entry per phase with the mean L1+L2, L3 and student
    authentic-vs-deepfake distance at the phase start and end.
    """
    Xa, Xd = pairs
    if len(Xa) < 100:
        raise ShapeError(f"need at least 100 pairs, got {len(Xa)}")
    rng = np.random.default_rng(seed)
    student = init_student(id_layer, teacher, cfg, seed=rng.integers(2**31))
    Ta = teacher_targets(teacher, student.adapter, Xa)
    Td = teacher_targets(teacher, student.adapter, Xd)

    def stats():
        l1, l2, l3 = distill_losses(Ta, extract(student, Xa), extract(student, Xd), Td, cfg.m_h)
        dist = np.linalg.norm(extract(student, Xa) - extract(student, Xd), axis=1)
        return {"l12": float(np.mean(l1 + l2)), "l3": float(np.mean(l3)),
                "distance": float(np.mean(dist))}

    for phase, (epochs, alpha, beta) in enumerate(cfg.schedule):
        opt = nn.OptimizerState(cfg.optimizer, lr=cfg.lr)
        start = stats()
        for epoch in range(int(epochs)):
            perm = rng.permutation(len(Xa))
            for b in range(0, len(Xa), cfg.batch_size):
                idx = perm[b:b + cfg.batch_size]
                try:
                    loss, grads = composite_loss_and_grads(
                        student, Xa[idx], Xd[idx], Ta[idx], Td[idx], alpha, beta, cfg.m_h)
                except ArithmeticError as exc:
                    raise TrainingError(f"distillation diverged in phase {phase} epoch {epoch}: {exc}")
                if not np.isfinite(loss):
                    raise TrainingError(f"distillation loss is NaN in phase {phase} epoch {epoch}")
                nn.step(student.net.params(), grads, opt)
        student.history.append({"phase": phase, "alpha": alpha, "beta": beta,
                                "epochs": int(epochs), "start": start, "end": stats()})
    return student


# --- files --------------------------------------------------------------------


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_teacher(teacher: TeacherNet, path):
    """Checkpoint plus a JSON sidecar holding the probe accuracy."""
    nn.save_net(teacher.net, path)
    _sidecar(path).write_text(json.dumps({"accuracy": teacher.accuracy}) + "\n")


def load_teacher(path) -> TeacherNet:
    side = json.loads(_sidecar(path).read_text())
    return TeacherNet(nn.load_net(path), float(side["accuracy"]))


def save_student(student: StudentNet, path):
    """Checkpoint plus a JSON sidecar with the adapter and training history."""
    nn.save_net(student.net, path)
    side = {"adapter": student.adapter.tolist(), "history": student.history}
    _sidecar(path).write_text(json.dumps(side, sort_keys=True) + "\n")


def load_student(path) -> StudentNet:
    side = json.loads(_sidecar(path).read_text())
    return StudentNet(nn.load_net(path), np.array(side["adapter"], dtype=np.float64),
                      side["history"])
