import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfid import nn
from dfid.errors import NumericError, ShapeError

from oracles import central_diff


def linear(W, b, act="linear"):
    return nn.DenseNet([nn.Layer(np.array(W, float), np.array(b, float), act)])


class TestForward:
    def test_identity_layer(self):
        assert np.array_equal(nn.forward(linear(np.eye(2), [0, 0]), [1.0, 2.0]), [1.0, 2.0])

    def test_relu_clamps(self):
        assert np.array_equal(nn.forward(linear(np.eye(2), [0, 0], "relu"), [-1.0, 2.0]), [0.0, 2.0])

    def test_hand_matrix_multiply(self):
        out = nn.forward(linear([[1, 1], [0, 1]], [0.5, 0]), [1.0, 1.0])
        assert np.allclose(out, [2.5, 1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            nn.forward(linear(np.eye(2), [0, 0]), [1.0, 2.0, 3.0])

    def test_layers_must_chain(self):
        with pytest.raises(ShapeError):
            nn.DenseNet([nn.Layer(np.ones((3, 2)), np.zeros(3)), nn.Layer(np.ones((2, 2)), np.zeros(2))])

    def test_batch_matches_rows(self):
        net = nn.init_net([5, 7, 3], ["tanh", "linear"], np.random.default_rng(0))
        X = np.random.default_rng(1).standard_normal((4, 5))
        assert np.allclose(nn.forward(net, X), np.stack([nn.forward(net, x) for x in X]))


class TestLosses:
    def test_euclidean(self):
        assert nn.euclidean_distance([0, 0], [3, 4]) == 5.0
        assert math.isclose(nn.euclidean_distance([1, 1, 1], [2, 3, 4]), math.sqrt(14))
        with pytest.raises(ShapeError):
            nn.euclidean_distance([1, 2], [1, 2, 3])

    def test_contrastive_values(self):
        assert nn.contrastive_loss(0.0, 0, 2.0) == 0.0
        assert nn.contrastive_loss(2.5, 1, 2.0) == 0.0
        assert nn.contrastive_loss(0.5, 1, 2.0) == 2.25

    def test_hinge_values(self):
        assert nn.hinge_sq_loss(60, 50) == 0.0
        assert nn.hinge_sq_loss(40, 50) == 100.0
        assert nn.hinge_sq_loss(0, 50) == 2500.0

    def test_mse_values(self):
        assert nn.mse_loss([0, 0], [1, 1]) == 1.0
        assert nn.mse_loss([1, 2], [2, 4]) == 2.5
        with pytest.raises(ShapeError):
            nn.mse_loss([1, 2], [1])

    def test_dense_grid_matches_definition(self):
        d = np.linspace(0, 4, 81)
        for m in (0.5, 1.0, 2.0, 3.7):
            for y in (0, 1):
                expect = [(1 - y) * v * v + y * max(0.0, m - v) ** 2 for v in d]
                assert np.allclose(nn.contrastive_loss(d, y, m), expect, rtol=0, atol=1e-15)
            assert np.allclose(nn.hinge_sq_loss(d, m), [max(0.0, m - v) ** 2 for v in d], atol=1e-15)

    @given(d=st.floats(0, 10), m=st.floats(0.1, 10), y=st.sampled_from([0, 1]))
    def test_contrastive_zero_set(self, d, m, y):
        loss = nn.contrastive_loss(d, y, m)
        assert loss >= 0
        if (y == 0 and d == 0) or (y == 1 and d >= m):
            assert loss == 0
        elif loss == 0:
            # underflow of a tiny square is the only other way to reach zero
            assert (m - d if y else d) < 1e-150

    @given(d=st.floats(0.01, 5), m=st.floats(0.1, 5), y=st.sampled_from([0, 1]))
    def test_loss_grads_match_differences(self, d, m, y):
        if abs(d - m) < 1e-3:
            return
        g = central_diff(lambda v: nn.contrastive_loss(v[0], y, m), [d])[0]
        assert math.isclose(nn.contrastive_loss_grad(d, y, m), g, rel_tol=1e-5, abs_tol=1e-7)
        gh = central_diff(lambda v: nn.hinge_sq_loss(v[0], m), [d])[0]
        assert math.isclose(nn.hinge_sq_loss_grad(d, m), gh, rel_tol=1e-5, abs_tol=1e-7)

    def test_label_semantics_signs(self):
        # larger distance lowers the authentic-pair loss and raises the processed-pair loss
        d = np.linspace(0.05, 1.95, 20)
        assert np.all(nn.contrastive_loss_grad(d, 1, 2.0) < 0)
        assert np.all(nn.contrastive_loss_grad(d, 0, 2.0) > 0)


class TestBackprop:
    def test_scalar_chain_rule(self):
        net = linear([[1.0]], [0.0])
        loss, grads = nn.backprop_grads(net, nn.mse_tail, nn.Batch([[2.0]], [[0.0]]))
        assert loss == 4.0
        assert grads[0][0, 0] == 8.0

    def test_constant_parameter_gets_zero(self):
        net = linear([[1.0, 5.0]], [0.0])
        _, grads = nn.backprop_grads(net, nn.mse_tail, nn.Batch([[2.0, 0.0]], [[0.0]]))
        assert grads[0][0, 1] == 0.0

    def test_frozen_prefix_excluded(self):
        net = nn.init_net([4, 6, 3], ["tanh", "linear"], np.random.default_rng(0))
        net.frozen_prefix_len = 1
        _, grads = nn.backprop_grads(net, nn.mse_tail, nn.Batch(np.ones((2, 4)), np.zeros((2, 3))))
        assert len(grads) == 2 and grads[0].shape == (3, 6)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_reports_layer(self):
        net = linear([[1e308, 1e308]], [0.0])
        with pytest.raises(NumericError) as info:
            nn.backprop_grads(net, nn.mse_tail, nn.Batch([[1e308, 1e308]], [[0.0]]))
        assert info.value.layer is not None

    def test_batch_rejects_nonfinite(self):
        with pytest.raises(ShapeError):
            nn.Batch([[np.nan, 1.0]])

    @pytest.mark.parametrize("seed", range(20))
    def test_reconstruction_mse_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        net = nn.init_net([6, 5, 3, 5, 6], ["tanh", "tanh", "tanh", "linear"], rng)
        X = rng.standard_normal((7, 6))
        assert nn.grad_check(net, nn.mse_tail, nn.Batch(X, X)) < 1e-4

    def test_linear_grad_check_tight(self):
        rng = np.random.default_rng(3)
        net = nn.init_net([4, 3], ["linear"], rng)
        X = rng.standard_normal((5, 4))
        assert nn.grad_check(net, nn.mse_tail, nn.Batch(X, rng.standard_normal((5, 3)))) < 1e-6

    def test_relu_grad_check_away_from_kinks(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            net = nn.init_net([4, 8, 2], ["relu", "linear"], rng)
            X = rng.standard_normal((3, 4))
            if nn.min_kink_distance(net, X) >= 1e-3:
                assert nn.grad_check(net, nn.mse_tail, nn.Batch(X, np.zeros((3, 2)))) < 1e-4

    def test_grad_check_detects_corruption(self):
        rng = np.random.default_rng(0)
        net = nn.init_net([3, 4, 2], ["tanh", "linear"], rng)
        batch = nn.Batch(rng.standard_normal((5, 3)), rng.standard_normal((5, 2)))
        _, grads = nn.backprop_grads(net, nn.mse_tail, batch)
        bad = [g * 1.1 for g in grads]
        err = nn.grad_check_params(net.params(), lambda: nn.loss_value(net, nn.mse_tail, batch), bad)
        assert 0.05 < err < 0.15

    def test_grad_check_rejects_bad_eps(self):
        with pytest.raises(ShapeError):
            nn.grad_check_params([], lambda: 0.0, [], eps=0)


class TestOptimizer:
    def test_sgd(self):
        p = np.array([1.0])
        nn.step([p], [np.array([2.0])], nn.OptimizerState("sgd", lr=0.1))
        assert math.isclose(p[0], 0.8)

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_zero_grad_is_noop(self, kind):
        p = np.array([1.0, -2.0])
        nn.step([p], [np.zeros(2)], nn.OptimizerState(kind, lr=0.1))
        assert np.array_equal(p, [1.0, -2.0])

    def test_adam_first_step(self):
        p = np.array([0.0])
        state = nn.OptimizerState("adam", lr=0.001)
        nn.step([p], [np.array([1.0])], state)
        assert math.isclose(p[0], -0.001, rel_tol=1e-6)
        assert state.m[0].shape == p.shape and state.v[0].shape == p.shape

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.step([np.zeros(2)], [np.zeros(3)], nn.OptimizerState("sgd"))

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            nn.OptimizerState("rmsprop")

    def test_training_is_deterministic_and_respects_freeze(self):
        def run():
            rng = np.random.default_rng(5)
            net = nn.init_net([4, 6, 4], ["tanh", "linear"], rng)
            net.frozen_prefix_len = 1
            frozen = net.layers[0].weight.copy()
            X = rng.standard_normal((16, 4))
            opt = nn.OptimizerState("adam", lr=0.01)
            for _ in range(25):
                _, g = nn.backprop_grads(net, nn.mse_tail, nn.Batch(X, X))
                nn.step(net.params(), g, opt)
            assert np.array_equal(net.layers[0].weight, frozen)
            return np.concatenate([p.ravel() for p in net.all_params()])

        assert np.array_equal(run(), run())


class TestInit:
    def test_glorot_bounds(self):
        net = nn.init_net([30, 20], ["linear"], np.random.default_rng(0))
        assert np.abs(net.layers[0].weight).max() <= math.sqrt(6 / 50)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = nn.init_net([5, 4, 3], ["relu", "tanh"], np.random.default_rng(2))
        net.frozen_prefix_len = 1
        nn.save_net(net, tmp_path / "n.ckpt")
        back = nn.load_net(tmp_path / "n.ckpt")
        assert back.frozen_prefix_len == 1
        assert [layer.activation for layer in back.layers] == ["relu", "tanh"]
        for a, b in zip(net.all_params(), back.all_params()):
            assert np.array_equal(a, b)

    def test_layout_is_little_endian_float64(self, tmp_path):
        net = linear([[1.5]], [-2.0])
        nn.save_net(net, tmp_path / "n.ckpt")
        raw = (tmp_path / "n.ckpt").read_bytes()
        assert raw[:4] == b"DNET"
        assert raw.endswith(np.array([1.5, -2.0], "<f8").tobytes())

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ShapeError):
            nn.load_net(tmp_path / "x.ckpt")
