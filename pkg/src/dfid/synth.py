"""Synthetic identity-structured face vectors and two toy deepfake generators.

Geometry: a random orthonormal frame of R^D is split into two 4-dim signature
subspaces (one per generator family) and a face subspace holding every
identity's mean and pose basis. Authentic noise is isotropic over all of R^D.

Family A ("swap-blend") moves a source face onto the target identity: the pose
coefficients are read off in the source's pose basis and re-expressed in the
target's, a fraction ``blend`` of the source's off-pose texture is carried over,
and a fixed pattern is added in A's signature subspace.

Family B ("noise-renoise") starts from the same core, shrinks it componentwise
toward the target mean with fixed per-coordinate weights, and adds its own
pattern in B's signature subspace.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dfid.errors import GenerationError, ShapeError, SplitError

AUTHENTIC, DEEPFAKE = 1, 0
FAMILIES = ("A", "B")
SIG_DIM = 4


@dataclass(frozen=True)
class IdentityPrototype:
    index: int
    mean: np.ndarray
    pose_basis: np.ndarray  # (D, p), orthonormal columns
    texture_seed: int = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class Population:
    prototypes: list[IdentityPrototype]
    signature_basis: dict  # family -> (D, SIG_DIM)
    signature_pattern: dict  # family -> (SIG_DIM,) of +-1
    shrink_profile: np.ndarray  # (D,) weights in [0, 1] for family-B smoothing
    seed: int = 0

    def __len__(self):
        return len(self.prototypes)

    def __getitem__(self, k) -> IdentityPrototype:
        return self.prototypes[k]

    def __iter__(self):
        return iter(self.prototypes)

    @property
    def D(self) -> int:
        return self.prototypes[0].dim

    @property
    def p(self) -> int:
        return self.prototypes[0].pose_basis.shape[1]


@dataclass(frozen=True)
class GeneratorParams:
    blend: float = 0.3  # fraction of the source's off-pose texture kept
    signature_amp: float = 0.1
    smoothing: float = 1.0  # family B: max componentwise shrink weight

    @classmethod
    def traceless(cls):
        """A generator that leaves no trace: full texture, no signature, no shrink."""
        return cls(blend=1.0, signature_amp=0.0, smoothing=0.0)


@dataclass
class FaceSample:
    x: np.ndarray
    identity: int
    session: int
    label: int  # 1 authentic, 0 deepfake
    index: int = 0
    generator: str | None = None
    source_identity: int | None = None

    def __post_init__(self):
        if self.label == AUTHENTIC and (self.generator or self.source_identity is not None):
            raise ShapeError("authentic samples carry no provenance")
        if self.label == DEEPFAKE and self.generator not in FAMILIES:
            raise ShapeError("deepfake samples must record their generator family")

    @property
    def sample_id(self) -> str:
        tag = "a" if self.label == AUTHENTIC else f"d{self.generator}"
        return f"{self.identity}-{self.session}-{tag}{self.index}"

    @property
    def sort_key(self):
        return (self.identity, self.session, 1 - self.label, self.generator or "", self.index)


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def gen_population(K=10, D=32, p=4, seed=0, proto_scale=1.5, max_tries=1000) -> Population:
    if K < 2 or D < 8 or p < 1 or p >= D:
        raise ShapeError(f"invalid population geometry K={K} D={D} p={p}")
    rng = np.random.default_rng(seed)
    frame = _orthonormal(rng, D, D)
    sig_a, sig_b = frame[:, :SIG_DIM], frame[:, SIG_DIM:2 * SIG_DIM]
    face = frame[:, 2 * SIG_DIM:]
    if face.shape[1] < p + 1:
        # too small to reserve signature dims; faces use the whole space
        face = frame
    means = []
    tries = 0
    while len(means) < K:
        m = face @ (proto_scale * rng.standard_normal(face.shape[1]))
        if all(np.linalg.norm(m - o) > 1.0 for o in means):
            means.append(m)
            continue
        tries += 1
        if tries >= max_tries:
            raise GenerationError(f"could not place {K} separated prototypes in {max_tries} tries")
    protos = [
        IdentityPrototype(k, means[k], face @ _orthonormal(rng, face.shape[1], p),
                          int(rng.integers(2**31)))
        for k in range(K)
    ]
    patterns = {f: rng.choice([-1.0, 1.0], size=SIG_DIM) for f in FAMILIES}
    # family B flattens half of the coordinates onto the target mean
    shrink = np.zeros(D)
    shrink[rng.permutation(D)[: D // 2]] = 1.0
    return Population(protos, {"A": sig_a, "B": sig_b}, patterns, shrink, seed)


def gen_authentic(proto: IdentityPrototype, n, sessions, noise_sigma=0.25, seed=0,
                  session_offset=0) -> list[FaceSample]:
    """x = mean + pose_basis z + eps, sessions assigned round-robin from 1.

    ``index`` is the frame number within the session.
    """
    if n < 1 or sessions < 1:
        raise ShapeError("need n >= 1 and sessions >= 1")
    rng = np.random.default_rng(seed)
    p = proto.pose_basis.shape[1]
    z = rng.standard_normal((n, p))
    eps = noise_sigma * rng.standard_normal((n, proto.dim))
    X = proto.mean + z @ proto.pose_basis.T + eps
    return [
        FaceSample(X[i], proto.index, session_offset + 1 + i % sessions, AUTHENTIC,
                   index=i // sessions)
        for i in range(n)
    ]


def apply_generator(family, x, source: IdentityPrototype, target: IdentityPrototype,
                    population: Population, params: GeneratorParams = GeneratorParams()):
    """The generator as an operator on raw vectors (1-D or a batch of rows).

    Self-application (source is target) is allowed here; dataset deepfakes go
    through make_deepfake, which insists on a different source identity.
    """
    if family not in FAMILIES:
        raise ShapeError(f"unknown generator family {family!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != target.dim:
        raise ShapeError(f"expected vectors of length {target.dim}")
    centered = x - source.mean
    coeff = centered @ source.pose_basis
    texture = centered - coeff @ source.pose_basis.T
    offset = coeff @ target.pose_basis.T + params.blend * texture
    if family == "B":
        offset = (1.0 - params.smoothing * population.shrink_profile) * offset
    return target.mean + offset + signature_vector(population, family, params)


def signature_vector(population: Population, family, params: GeneratorParams = GeneratorParams()):
    """The fixed trace a generator family stamps on every output."""
    sig = population.signature_basis[family] @ population.signature_pattern[family]
    return params.signature_amp * sig


def make_deepfake(family, source: FaceSample, source_proto: IdentityPrototype,
                  target_proto: IdentityPrototype, population: Population,
                  params: GeneratorParams = GeneratorParams(), index=0) -> FaceSample:
    if source.identity == target_proto.index:
        raise ShapeError("deepfake source and target identities must differ")
    if source.label != AUTHENTIC:
        raise ShapeError("deepfake source must be authentic")
    x = apply_generator(family, source.x, source_proto, target_proto, population, params)
    return FaceSample(x, target_proto.index, source.session, DEEPFAKE, index=index,
                      generator=family, source_identity=source.identity)


# --- dataset assembly ---------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """Per-identity session budget. Sessions 1..train+val feed the detector
    (validation rotates through them), the next ``recon`` sessions train the
    reconstruction operators, the last ``test`` sessions are held out."""
    recon: int = 5
    train: int = 4
    val: int = 1
    test: int = 2
    rotation: int = 0

    @property
    def total(self) -> int:
        return self.recon + self.train + self.val + self.test

    def partition_of(self, session: int) -> str:
        det = self.train + self.val
        if 1 <= session <= det:
            lo = 1 + (self.rotation * self.val) % det
            val_sessions = {(lo - 1 + i) % det + 1 for i in range(self.val)}
            return "validation" if session in val_sessions else "detector_train"
        if det < session <= det + self.recon:
            return "recon_train"
        if det + self.recon < session <= self.total:
            return "test"
        return "unused"


@dataclass
class DatasetSplit:
    recon_train: list[FaceSample] = field(default_factory=list)
    detector_train: list[FaceSample] = field(default_factory=list)
    validation: list[FaceSample] = field(default_factory=list)
    test: list[FaceSample] = field(default_factory=list)

    PARTS = ("recon_train", "detector_train", "validation", "test")

    def parts(self):
        return {name: getattr(self, name) for name in self.PARTS}


def split_sessions(samples, plan: SplitPlan) -> DatasetSplit:
    sessions: dict[int, set] = {}
    for s in samples:
        sessions.setdefault(s.identity, set()).add(s.session)
    for ident, sess in sorted(sessions.items()):
        if len(sess) < plan.total:
            raise SplitError(
                f"identity {ident} has {len(sess)} sessions, plan needs {plan.total}"
            )
    split = DatasetSplit()
    for s in sorted(samples, key=lambda s: s.sort_key):
        part = plan.partition_of(s.session)
        if part == "unused" or (part == "recon_train" and s.label != AUTHENTIC):
            continue
        getattr(split, part).append(s)
    return split


@dataclass(frozen=True)
class DataConfig:
    K: int = 10
    D: int = 32
    p: int = 4
    noise_sigma: float = 0.25
    frames_per_session: int = 80
    pool_per_identity: int = 2000
    plan: SplitPlan = SplitPlan()
    generator: GeneratorParams = GeneratorParams()
    test_families: tuple = ("A", "B")
    train_family: str = "A"


def generate_samples(population: Population, cfg: DataConfig, seed=0) -> list[FaceSample]:
    """All authentic sessions plus deepfakes for every non-recon session.

    A deepfake of target i in session j takes its source from the same frame of
    session j of a randomly chosen other identity.
    """
    n_sess = cfg.plan.total
    n = n_sess * cfg.frames_per_session
    auth = {
        p.index: gen_authentic(p, n, n_sess, cfg.noise_sigma, seed=[seed, 0, p.index])
        for p in population
    }
    out = [s for k in sorted(auth) for s in auth[k]]
    K = len(population)
    for target in population:
        rng = np.random.default_rng([seed, 1, target.index])
        for src_idx, src_sample in enumerate(auth[target.index]):
            part = cfg.plan.partition_of(src_sample.session)
            if part in ("recon_train", "unused"):
                continue
            m = int(rng.integers(K - 1))
            m = m + 1 if m >= target.index else m
            source = auth[m][src_idx]
            fams = cfg.test_families if part == "test" else (cfg.train_family,)
            for fam in fams:
                out.append(make_deepfake(fam, source, population[m], target, population,
                                         cfg.generator, index=src_sample.index))
    return out


def gen_pool(population: Population, cfg: DataConfig, seed=0) -> list[FaceSample]:
    """Balanced authentic / family-A pool for teacher pretraining.

    Sessions are numbered past the split plan so they never overlap a split.
    """
    offset = 1000
    n = cfg.pool_per_identity
    auth = {p.index: gen_authentic(p, n, 1, cfg.noise_sigma, seed=[seed, 2, p.index],
                                   session_offset=offset) for p in population}
    out = []
    K = len(population)
    for target in population:
        rng = np.random.default_rng([seed, 3, target.index])
        out.extend(auth[target.index][: n // 2])
        for q in range(n // 2, n):
            m = int(rng.integers(K - 1))
            m = m + 1 if m >= target.index else m
            out.append(make_deepfake(cfg.train_family, auth[m][q], population[m], target,
                                     population, cfg.generator, index=q - n // 2))
    return out


def stack(samples):
    """Arrays (X, identity, label, session) for a list of samples."""
    if not samples:
        return np.zeros((0, 0)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)
    X = np.stack([s.x for s in samples])
    ident = np.array([s.identity for s in samples])
    label = np.array([s.label for s in samples])
    sess = np.array([s.session for s in samples])
    return X, ident, label, sess


# --- files -----------------------------------------------------------------


def write_samples_csv(samples, path):
    samples = sorted(samples, key=lambda s: s.sort_key)
    D = samples[0].x.shape[0] if samples else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["identity", "session", "label", "generator", "source_identity"]
                   + [f"x{i}" for i in range(D)])
        for s in samples:
            w.writerow([s.identity, s.session, s.label, s.generator or "",
                        "" if s.source_identity is None else s.source_identity]
                       + [repr(float(v)) for v in s.x])


def read_samples_csv(path) -> list[FaceSample]:
    """Inverse of write_samples_csv; frame indices are recovered from row order."""
    out = []
    counts: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs = [k for k in row if k.startswith("x")]
            group = (row["identity"], row["session"], row["label"], row["generator"])
            counts[group] = counts.get(group, -1) + 1
            out.append(FaceSample(
                np.array([float(row[k]) for k in xs]),
                int(row["identity"]), int(row["session"]), int(row["label"]),
                index=counts[group],
                generator=row["generator"] or None,
                source_identity=int(row["source_identity"]) if row["source_identity"] else None,
            ))
    return out


def save_population(pop: Population, path):
    np.savez(path, means=np.stack([p.mean for p in pop]),
             bases=np.stack([p.pose_basis for p in pop]),
             texture=np.array([p.texture_seed for p in pop]),
             sig_A=pop.signature_basis["A"], sig_B=pop.signature_basis["B"],
             pat_A=pop.signature_pattern["A"], pat_B=pop.signature_pattern["B"],
             shrink=pop.shrink_profile, seed=pop.seed)


def load_population(path) -> Population:
    z = np.load(path)
    protos = [IdentityPrototype(k, z["means"][k], z["bases"][k], int(z["texture"][k]))
              for k in range(z["means"].shape[0])]
    return Population(protos, {"A": z["sig_A"], "B": z["sig_B"]},
                      {"A": z["pat_A"], "B": z["pat_B"]}, z["shrink"], int(z["seed"]))


def write_dataset(out_dir, population, split: DatasetSplit, cfg: DataConfig, seed):
    """One CSV per split plus population.npz and a manifest of every parameter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, samples in split.parts().items():
        write_samples_csv(samples, out_dir / f"{name}.csv")
    save_population(population, out_dir / "population.npz")
    manifest = {"seed": seed, "config": asdict(cfg),
                "counts": {k: len(v) for k, v in split.parts().items()}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(out_dir):
    out_dir = Path(out_dir)
    split = DatasetSplit(**{name: read_samples_csv(out_dir / f"{name}.csv")
                            for name in DatasetSplit.PARTS})
    return load_population(out_dir / "population.npz"), split, json.loads(
        (out_dir / "manifest.json").read_text())
