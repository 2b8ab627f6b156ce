import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfid import metrics, synth
from dfid.errors import MetricError

import oracles


class TestAuc:
    def test_perfect_and_reversed(self):
        assert metrics.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
        assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]).auc == 0.0

    def test_all_tied(self):
        assert metrics.roc_auc([0.5] * 4, [1, 0, 1, 0]).auc == 0.5

    def test_hand_example(self):
        assert metrics.roc_auc([0.9, 0.3, 0.5, 0.1], [1, 1, 0, 0]).auc == 0.75

    def test_errors(self):
        with pytest.raises(MetricError):
            metrics.roc_auc([0.1, 0.2], [1, 1])
        with pytest.raises(MetricError):
            metrics.roc_auc([0.1, np.nan], [1, 0])
        with pytest.raises(MetricError):
            metrics.roc_auc([0.1, 0.2, 0.3], [1, 0])

    def test_curve_endpoints_and_area(self):
        rng = np.random.default_rng(0)
        s = rng.integers(0, 20, 300).astype(float)
        y = rng.integers(0, 2, 300)
        roc = metrics.roc_auc(s, y)
        assert (roc.fpr[0], roc.tpr[0], roc.fpr[-1], roc.tpr[-1]) == (0, 0, 1, 1)
        assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
        # trapezoid area under the step curve equals the tie-aware AUC
        area = np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) / 2)
        assert area == pytest.approx(roc.auc, abs=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_pair_counting_bit_exactly(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 1001))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.standard_normal(n)
        dup = rng.random(n) < 0.3
        s[dup] = rng.choice(s[~dup][:5], size=dup.sum()) if (~dup).any() else 0.0
        s = np.round(s, int(rng.integers(0, 3))) if seed % 3 == 0 else s
        assert metrics.roc_auc(s, y).auc == oracles.auc_pairs(s[y == 1], s[y == 0])

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=30),
           st.lists(st.integers(0, 5), min_size=1, max_size=30))
    def test_swap_symmetry(self, pos, neg):
        assert metrics.auc_pairs(pos, neg) + metrics.auc_pairs(neg, pos) == pytest.approx(1.0)


class TestSummary:
    def test_against_oracle(self):
        rng = np.random.default_rng(3)
        for n in (2, 3, 10, 19, 20, 45):
            a = rng.uniform(0.5, 1.0, n)
            got = metrics.auc_summary(a)
            for key, val in oracles.summary(a).items():
                assert abs(getattr(got, key) - val) < 1e-12, key

    def test_trim_counts(self):
        assert metrics.trimmed_mean(np.arange(20.0))[1] == 1
        assert metrics.trimmed_mean(np.arange(19.0))[1] == 0
        assert metrics.trimmed_mean(np.arange(40.0))[1] == 2
        v = np.arange(20.0)
        v[0], v[-1] = -1000.0, 1000.0
        assert metrics.trimmed_mean(v)[0] == np.mean(np.arange(1.0, 19.0))

    def test_too_few(self):
        with pytest.raises(MetricError):
            metrics.auc_summary([0.9])

    def test_to_dict(self):
        d = metrics.auc_summary([0.8, 0.9, 1.0]).to_dict()
        assert d["median"] == 0.9 and d["n_trimmed_per_tail"] == 0


def sample(identity, session, index, label=synth.AUTHENTIC):
    gen = None if label == synth.AUTHENTIC else "A"
    src = None if label == synth.AUTHENTIC else (identity + 1) % 3
    return synth.FaceSample(np.zeros(2), identity, session, label, generator=gen,
                            source_identity=src, index=index)


class TestExport:
    def test_empty(self, tmp_path):
        metrics.export_vectors([], np.zeros((0, 0)), tmp_path / "v.csv")
        assert (tmp_path / "v.csv").read_text() == "sample_id,identity,session,label,generator\n"

    def test_round_trip_and_order(self, tmp_path):
        ss = [sample(1, 2, 0), sample(0, 3, 1, synth.DEEPFAKE), sample(0, 1, 0)]
        F = np.array([[1.0, 2.0, 0.1], [3.0, 4.0, 1 / 3], [5.0, 6.0, -7.5]])
        metrics.export_vectors(ss, F, tmp_path / "v.csv")
        meta, back = metrics.read_vectors(tmp_path / "v.csv")
        assert [(m["identity"], m["session"]) for m in meta] == [("0", "1"), ("0", "3"), ("1", "2")]
        assert np.array_equal(back, F[[2, 1, 0]])
        assert meta[1]["generator"] == "A" and meta[0]["generator"] == ""
        header = (tmp_path / "v.csv").read_text().splitlines()[0].split(",")
        assert len(header) == len(metrics.VECTOR_META) + 3

    def test_row_count_mismatch(self, tmp_path):
        with pytest.raises(MetricError):
            metrics.export_vectors([sample(0, 1, 0)], np.zeros((2, 3)), tmp_path / "v.csv")
