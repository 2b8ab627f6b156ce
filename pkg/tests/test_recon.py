import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfid import nn, recon, synth
from dfid.errors import ShapeError


@pytest.fixture(scope="module")
def world():
    pop = synth.gen_population(4, 32, 4, seed=0)
    cfg = synth.DataConfig(K=4, frames_per_session=40)
    split = synth.split_sessions(synth.generate_samples(pop, cfg, seed=0), cfg.plan)
    fp = synth.signature_vector(pop, "A", cfg.generator)
    ops = recon.train_all(split.recon_train, recon.ReconConfig(), seed=0, fingerprint=fp)
    return pop, cfg, split, ops


def auth(samples, k=None):
    return [s for s in samples if s.label == synth.AUTHENTIC and (k is None or s.identity == k)]


class TestTraining:
    def test_learns_identity(self, world):
        _, _, _, ops = world
        for op in ops.values():
            assert op.meta["holdout_mse"] < 0.5 * op.meta["holdout_var"]
            assert op.meta["fingerprint"] is True

    def test_constant_samples(self):
        samples = [synth.FaceSample(np.full(10, 2.0), 0, 1 + i % 3, synth.AUTHENTIC, index=i // 3)
                   for i in range(60)]
        op = recon.train_recon(samples, recon.ReconConfig(bottleneck=2, hidden=4, epochs=200), seed=0)
        assert np.abs(op(np.full(10, 2.0)) - 2.0).max() < 1e-2

    def test_deterministic(self, world):
        _, _, split, _ = world
        cfg = recon.ReconConfig(epochs=5)
        a = recon.train_recon(auth(split.recon_train, 1), cfg, seed=3)
        b = recon.train_recon(auth(split.recon_train, 1), cfg, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a.net.all_params(), b.net.all_params()))

    def test_input_checks(self, world):
        _, _, split, _ = world
        with pytest.raises(ShapeError):
            recon.train_recon(auth(split.recon_train, 0)[:10])
        with pytest.raises(ShapeError):
            recon.train_recon(auth(split.recon_train, 0) + auth(split.recon_train, 1))
        with pytest.raises(ShapeError):
            recon.train_recon(auth(split.recon_train, 0), recon.ReconConfig(bottleneck=32))

    def test_cross_identity_specialization(self, world):
        _, _, split, ops = world
        for i, op in ops.items():
            mse = {j: nn.mse_loss(op(X := np.stack([s.x for s in auth(split.test, j)])), X) for j in ops}
            assert min(mse, key=mse.get) == i

    def test_closer_than_wrong_prototype(self, world):
        pop, _, split, ops = world
        for s in auth(split.test)[:200]:
            wrong = pop[(s.identity + 1) % len(pop)].mean
            assert np.linalg.norm(ops[s.identity](s.x) - s.x) < np.linalg.norm(s.x - wrong)


class TestApply:
    def test_zero_weights_give_bias(self):
        net = nn.init_net([6, 3, 6], ["tanh", "linear"], np.random.default_rng(0))
        for p in net.all_params():
            p[...] = 0
        net.layers[-1].bias[:] = np.arange(6.0)
        op = recon.ReconOperator(0, net, np.zeros(6))
        X = np.random.default_rng(1).standard_normal((4, 6))
        assert np.array_equal(op(X), np.tile(np.arange(6.0), (4, 1)))

    def test_referential_transparency(self, world):
        _, _, split, ops = world
        x = split.test[0].x
        assert np.array_equal(ops[0](ops[0](x)), recon.apply(ops[0], recon.apply(ops[0], x)))

    def test_dimension_mismatch(self, world):
        with pytest.raises(ShapeError):
            world[3][0](np.zeros(5))

    def test_refingerprint_matches_retraining(self, world):
        pop, cfg, split, _ = world
        data = auth(split.recon_train, 2)
        rc = recon.ReconConfig(epochs=5)
        fa = synth.signature_vector(pop, "A", cfg.generator)
        fb = synth.signature_vector(pop, "B", cfg.generator)
        a = recon.train_recon(data, rc, seed=1, fingerprint=fa)
        b = recon.train_recon(data, rc, seed=1, fingerprint=fb)
        swapped = recon.refingerprint(a, fa, fb)
        X = np.stack([s.x for s in data])
        assert np.allclose(swapped(X), b(X), atol=1e-12)
        assert np.array_equal(a(X), recon.train_recon(data, rc, seed=1, fingerprint=fa)(X))


class TestResiduals:
    def test_strict_idempotence_gives_zero(self):
        P = np.diag([1.0, 1.0, 0.0])
        proj = lambda X: np.atleast_2d(X) @ P  # noqa: E731
        X = np.random.default_rng(0).standard_normal((5, 3))
        e0, e1 = recon.residual_norms(proj, X, df_op=proj)
        assert np.all(e1 == 0) and np.all(e0 > 0)

    def test_needs_processed_input(self):
        with pytest.raises(ShapeError):
            recon.residual_norms(lambda X: X, np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            recon.residual_norms(lambda X: X, np.zeros((2, 3)), processed=np.zeros((3, 3)))

    def test_same_family_near_idempotent(self, world):
        pop, cfg, split, ops = world
        recs = []
        for k, op in ops.items():
            ss = auth(split.test, k)
            G = recon.GeneratorOperator("A", pop[k], pop, cfg.generator)(np.stack([s.x for s in ss]))
            recs += recon.compute_residuals(op, ss, processed=G)
        e0 = np.array([r.e0_norm for r in recs])
        e1 = np.array([r.e1_norm for r in recs])
        assert np.median(e1) <= 0.5 * np.median(e0)
        assert recon.dominance(e1, e0) >= 0.9
        tau = np.percentile(e0, 20)
        assert recon.near_idem_fraction(recs, tau) >= 0.7

    def test_family_b_residuals_exceed_a(self, world):
        pop, cfg, split, ops = world
        med = {}
        for fam in synth.FAMILIES:
            e1 = []
            for k, op in ops.items():
                X = np.stack([s.x for s in auth(split.test, k)])
                G = recon.GeneratorOperator(fam, pop[k], pop, cfg.generator)(X)
                e1.append(recon.residual_norms(op, X, processed=G)[1])
            med[fam] = np.median(np.concatenate(e1))
        assert med["B"] > med["A"]


def rec(e0, e1):
    return recon.ResidualRecord("s", 0, "A", float(e0), float(e1))


class TestCdf:
    def test_counting(self):
        recs = [rec(v, 0.0) for v in (1.0, 2.0, 3.0)]
        t = recon.residual_cdf_stats(recs, [2.5])
        assert t.fraction_first == [2 / 3] and t.fraction_second == [1.0]

    def test_default_thresholds_percentiles(self):
        recs = [rec(v, v / 2) for v in range(1, 101)]
        t = recon.residual_cdf_stats(recs)
        assert t.thresholds == list(np.percentile(np.arange(1, 101), [10, 20, 30]))

    def test_rejects_bad_input(self):
        with pytest.raises(ShapeError):
            recon.residual_cdf_stats([])
        with pytest.raises(ShapeError):
            recon.residual_cdf_stats([rec(1, 1)], [2.0, 1.0])
        with pytest.raises(ShapeError):
            recon.near_idem_fraction([rec(1, 1)], -1)

    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=50),
           st.lists(st.floats(0, 12), min_size=1, max_size=6))
    def test_monotone_fractions(self, pairs, ts):
        t = recon.residual_cdf_stats([rec(a, b) for a, b in pairs], sorted(ts))
        for f in (t.fraction_first, t.fraction_second):
            assert all(0 <= x <= 1 for x in f)
            assert all(b >= a for a, b in zip(f, f[1:]))

    def test_near_idem_limits(self):
        recs = [rec(1.0, v) for v in (0.1, 0.5, 2.0)]
        assert recon.near_idem_fraction(recs, 0.0) == 0.0
        assert recon.near_idem_fraction(recs, 1e9) == 1.0

    def test_dominance_ties(self):
        assert recon.dominance([1.0], [1.0]) == 0.5
        assert recon.dominance([0.0, 0.0], [1.0]) == 1.0


class TestFiles:
    def test_operators_round_trip(self, world, tmp_path):
        _, _, split, ops = world
        recon.save_operators(ops, tmp_path)
        back = recon.load_operators(tmp_path)
        X = np.stack([s.x for s in split.test[:20]])
        for k in ops:
            assert np.array_equal(ops[k](X), back[k](X))
        meta = json.loads((tmp_path / "operators.json").read_text())
        assert set(meta) == {str(k) for k in ops}

    def test_residuals_csv(self, tmp_path):
        recon.write_residuals_csv([rec(1.5, 0.25)], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines == ["sample_id,identity,family_df,e0_norm,e1_norm", "s,0,A,1.5,0.25"]
