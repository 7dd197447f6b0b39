"""MLP container, training losses, Adam, the convex head solver, checkpoints.

The head solver gets an independent oracle: the same objective minimized by
scipy from scratch must land on the same optimum (it is strictly convex in
the weights), and hand-computed Adam updates pin the optimizer arithmetic.
"""
from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from metadiv.errors import InvalidInputError
from metadiv.numerics import RngStream
from metadiv.nnet import (
    MlpConfig,
    ParameterSet,
    accuracy,
    adam_step,
    feature_parameter_count,
    features,
    fit_logistic_head,
    forward,
    init_adam,
    init_mlp,
    inner_adapted_params,
    load_checkpoint,
    loss_and_grad,
    parameter_count,
    replace_head,
    save_checkpoint,
)

FULL_CONFIG = MlpConfig(input_size=1, hidden_sizes=(128, 128), output_size=5)


def tiny_params(seed=0, sizes=(2, 4, 3)):
    cfg = MlpConfig(input_size=sizes[0], hidden_sizes=sizes[1:-1], output_size=sizes[-1])
    return init_mlp(cfg, RngStream(seed)), cfg


class TestParameterSet:
    def test_full_architecture_parameter_count(self):
        params = init_mlp(FULL_CONFIG, RngStream(0))
        # 1*128+128 + 128*128+128 + 128*5+5
        assert parameter_count(params) == 17413

    def test_feature_parameter_count(self):
        params = init_mlp(FULL_CONFIG, RngStream(0))
        # head excluded: 1*128+128 + 128*128+128
        assert feature_parameter_count(params) == 16768

    def test_arrays_are_read_only(self):
        params, _ = tiny_params()
        with pytest.raises(ValueError):
            params.weights[0][0, 0] = 1.0

    def test_nonfinite_rejected(self):
        params, _ = tiny_params()
        bad_w = [w.copy() for w in params.weights]
        bad_w[0] = bad_w[0].copy()
        bad_w[0][0, 0] = np.nan
        with pytest.raises(InvalidInputError, match="layer 0"):
            ParameterSet(bad_w, [b.copy() for b in params.biases])

    def test_init_deterministic(self):
        a = init_mlp(FULL_CONFIG, RngStream(5))
        b = init_mlp(FULL_CONFIG, RngStream(5))
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_he_init_scale(self):
        params = init_mlp(FULL_CONFIG, RngStream(1))
        w2 = params.weights[1]  # 128 x 128: sd should be near sqrt(2/128)
        assert np.std(w2) == pytest.approx(np.sqrt(2.0 / 128), rel=0.1)
        assert all(np.all(b == 0.0) for b in params.biases)


class TestForward:
    def test_loss_at_init_is_log_k(self):
        # zero biases + final relu features ~ He scale keep logits small but
        # not zero; use a zero-weight head to get exactly uniform probabilities
        params, cfg = tiny_params(2, (1, 8, 5))
        zeroed = replace_head(params, np.zeros((8, 5)), np.zeros(5))
        x = np.linspace(-1, 1, 30).reshape(-1, 1)
        y = np.arange(30) % 5
        loss, _ = loss_and_grad(zeroed, x, y)
        assert loss == pytest.approx(np.log(5.0), abs=1e-12)

    def test_gradient_matches_differences(self):
        params, _ = tiny_params(3, (2, 6, 3))
        gen = np.random.default_rng(0)
        x = gen.normal(size=(12, 2))
        y = gen.integers(0, 3, size=12)
        _, grads = loss_and_grad(params, x, y)
        eps = 1e-6
        for li in range(len(params.weights)):
            w = params.weights[li]
            idx = (0, min(1, w.shape[1] - 1))
            wp = [a.copy() for a in params.weights]
            wm = [a.copy() for a in params.weights]
            wp[li][idx] += eps
            wm[li][idx] -= eps
            lp, _ = loss_and_grad(ParameterSet(wp, params.biases), x, y)
            lm, _ = loss_and_grad(ParameterSet(wm, params.biases), x, y)
            assert grads.weights[li][idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-6)

    def test_forward_trace_layers(self):
        params, _ = tiny_params(4, (2, 5, 7, 3))
        logits, trace = forward(params, np.zeros((6, 2)), source_model="m")
        assert [t.layer_name for t in trace] == ["hidden_1", "hidden_2", "head"]
        assert logits.shape == (6, 3)
        assert trace[0].source_model == "m"

    def test_features_are_last_hidden(self):
        params, _ = tiny_params(5, (2, 5, 7, 3))
        x = np.random.default_rng(1).normal(size=(4, 2))
        _, trace = forward(params, x)
        np.testing.assert_array_equal(features(params, x), trace[-2].matrix)

    def test_accuracy_hand_case(self):
        # head picks column 1 for positive x, column 0 otherwise
        params = ParameterSet([np.array([[1.0, -1.0]])], [np.zeros(2)])
        x = np.array([[2.0], [-2.0], [3.0]])
        assert accuracy(params, x, [0, 1, 0]) == 1.0
        assert accuracy(params, x, [1, 0, 1]) == 0.0

    def test_input_width_mismatch(self):
        params, _ = tiny_params()
        with pytest.raises(InvalidInputError):
            forward(params, np.zeros((3, 5)))


class TestAdam:
    def test_first_step_matches_hand_formula(self):
        params = ParameterSet([np.array([[1.0]])], [np.array([0.5])])
        grads = ParameterSet([np.array([[0.3]])], [np.array([-0.2])], check_finite=False)
        state = init_adam(params, lr=0.01)
        new_params, _ = adam_step(state, params, grads)
        # bias-corrected first step is -lr * sign-ish: m_hat = g, v_hat = g^2
        expected_w = 1.0 - 0.01 * 0.3 / (np.sqrt(0.3**2) + 1e-8)
        expected_b = 0.5 + 0.01 * 0.2 / (np.sqrt(0.2**2) + 1e-8)
        assert new_params.weights[0][0, 0] == pytest.approx(expected_w, abs=1e-12)
        assert new_params.biases[0][0] == pytest.approx(expected_b, abs=1e-12)

    def test_two_steps_match_reference_loop(self):
        gen = np.random.default_rng(7)
        w0 = gen.normal(size=(3, 2))
        params = ParameterSet([w0], [np.zeros(2)])
        state = init_adam(params, lr=0.05)
        g1 = gen.normal(size=(3, 2))
        g2 = gen.normal(size=(3, 2))

        # reference implementation straight from the update equations
        m = np.zeros_like(w0)
        v = np.zeros_like(w0)
        x = w0.copy()
        for t, g in [(1, g1), (2, g2)]:
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)

        for g in (g1, g2):
            gp = ParameterSet([g], [np.zeros(2)], check_finite=False)
            params, state = adam_step(state, params, gp)
        np.testing.assert_allclose(params.weights[0], x, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        params, _ = tiny_params()
        bad = ParameterSet([np.zeros((1, 1))], [np.zeros(1)], check_finite=False)
        with pytest.raises(InvalidInputError):
            adam_step(init_adam(params), params, bad)


class TestLogisticHead:
    def fit_case(self, seed=0, n=60, d=6, k=4, scale=1.0):
        gen = np.random.default_rng(seed)
        feats = np.abs(gen.normal(size=(n, d))) * scale
        labels = gen.integers(0, k, size=n)
        return feats, labels

    def test_gradient_norm_at_solution(self):
        feats, labels = self.fit_case()
        w, b = fit_logistic_head(feats, labels)
        # recompute the objective gradient at the returned head
        k = 4
        onehot = np.eye(k)[labels]
        z = feats @ w + b
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g_w = feats.T @ (p - onehot) + w
        g_b = (p - onehot).sum(axis=0)
        assert np.sqrt(np.sum(g_w**2) + np.sum(g_b**2)) <= 1e-7

    def test_matches_scipy_from_scratch(self):
        """Independent minimization of the identical objective agrees."""
        feats, labels = self.fit_case(seed=3)
        k, d = 4, 6
        onehot = np.eye(k)[labels]

        def obj(theta):
            w = theta[: d * k].reshape(d, k)
            b = theta[d * k:]
            z = feats @ w + b
            zmax = z.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
            ce = np.sum(lse - z[onehot.astype(bool)])
            return 0.5 * np.sum(w * w) + ce

        res = minimize(obj, np.zeros(d * k + k), method="L-BFGS-B",
                       options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-10})
        w, b = fit_logistic_head(feats, labels)
        ours = obj(np.concatenate([w.ravel(), b]))
        assert ours <= res.fun + 1e-8
        # predictions agree (optimum is unique up to the b shift direction)
        z_ref = feats @ res.x[: d * k].reshape(d, k) + res.x[d * k:]
        z_ours = feats @ w + b
        assert np.array_equal(z_ref.argmax(axis=1), z_ours.argmax(axis=1))

    def test_row_order_invariance(self):
        feats, labels = self.fit_case(seed=5)
        perm = np.random.default_rng(1).permutation(len(labels))
        w1, b1 = fit_logistic_head(feats, labels)
        w2, b2 = fit_logistic_head(feats[perm], labels[perm])
        np.testing.assert_allclose(w1, w2, atol=1e-6)
        np.testing.assert_allclose(b1, b2, atol=1e-6)

    def test_c_reg_shrinks_weights(self):
        feats, labels = self.fit_case(seed=6)
        w_strong, _ = fit_logistic_head(feats, labels, c_reg=0.05)
        w_weak, _ = fit_logistic_head(feats, labels, c_reg=5.0)
        assert np.linalg.norm(w_strong) < np.linalg.norm(w_weak)

    def test_extreme_scale_near_separable(self):
        # saturated regime: huge feature scale, rank-deficient, dead columns
        gen = np.random.default_rng(9)
        base = gen.normal(size=(50, 3)) @ gen.normal(size=(3, 16)) * 3000.0
        base[:, 10:] = 0.0
        labels = np.repeat(np.arange(5), 10)
        w, b = fit_logistic_head(base, labels)
        assert np.all(np.isfinite(w)) and np.all(np.isfinite(b))

    def test_label_validation(self):
        feats = np.ones((4, 2))
        with pytest.raises(InvalidInputError):
            fit_logistic_head(feats, [0, 0, 0, 0])  # single class
        with pytest.raises(InvalidInputError):
            fit_logistic_head(feats, [0, -1, 0, 1])  # negative label
        with pytest.raises(InvalidInputError):
            fit_logistic_head(feats, [0, 1, 2, 1, 0])  # length mismatch
        # A gap in the label range is allowed: the absent class is still
        # well-posed thanks to the L2 term, it just gets a small column.
        gen = np.random.default_rng(0)
        w, b = fit_logistic_head(gen.normal(size=(6, 2)), [0, 2, 0, 2, 0, 2])
        assert w.shape == (2, 3) and b.shape == (3,)
        assert np.all(np.isfinite(w))


class TestAdaptation:
    def test_one_inner_step_matches_manual_sgd(self):
        params, _ = tiny_params(11, (2, 5, 3))
        gen = np.random.default_rng(2)
        x = gen.normal(size=(9, 2))
        y = gen.integers(0, 3, size=9)
        adapted = inner_adapted_params(params, x, y, steps=1, inner_lr=0.1)
        _, grads = loss_and_grad(params, x, y)
        manual = [w - 0.1 * g for w, g in zip(params.weights, grads.weights)]
        got = adapted.values(check_finite=False)
        for mw, gw in zip(manual, got.weights):
            np.testing.assert_allclose(gw, mw, atol=1e-12)

    def test_meta_gradient_matches_differences(self):
        """Second-order meta-gradient against differencing the adapted loss."""
        params, _ = tiny_params(12, (1, 4, 2))
        gen = np.random.default_rng(3)
        sx = gen.normal(size=(6, 1))
        sy = gen.integers(0, 2, size=6)
        qx = gen.normal(size=(8, 1))
        qy = gen.integers(0, 2, size=8)

        def query_loss(p):
            a = inner_adapted_params(p, sx, sy, steps=2, inner_lr=0.1)
            vals = a.values(check_finite=False)
            z, _ = forward(vals, qx)
            ref = z - z.max(axis=1, keepdims=True)
            lse = np.log(np.exp(ref).sum(axis=1))
            return float(np.mean(lse - ref[np.arange(8), qy]))

        adapted = inner_adapted_params(params, sx, sy, steps=2, inner_lr=0.1)
        _, meta = adapted.meta_grad(qx, qy)
        eps = 1e-6
        w = params.weights[0]
        for idx in [(0, 0), (0, 2)]:
            wp = [a.copy() for a in params.weights]
            wm = [a.copy() for a in params.weights]
            wp[0][idx] += eps
            wm[0][idx] -= eps
            lp = query_loss(ParameterSet(wp, params.biases))
            lm = query_loss(ParameterSet(wm, params.biases))
            fd = (lp - lm) / (2 * eps)
            assert meta.weights[0][idx] == pytest.approx(fd, abs=1e-5)

    def test_zero_steps_identity(self):
        params, _ = tiny_params(13)
        adapted = inner_adapted_params(params, np.zeros((3, 2)), [0, 1, 2], steps=0, inner_lr=0.1)
        got = adapted.values(check_finite=False)
        for a, b in zip(params.weights, got.weights):
            np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_mlp(FULL_CONFIG, RngStream(21))
        path = tmp_path / "model.json"
        save_checkpoint(path, params, FULL_CONFIG, seed=21, metadata={"note": "t"})
        loaded, cfg, seed, meta = load_checkpoint(path)
        assert cfg == FULL_CONFIG
        assert seed == 21
        assert meta["note"] == "t"
        for a, b in zip(params.weights, loaded.weights):
            assert np.array_equal(a, b)
        for a, b in zip(params.biases, loaded.biases):
            assert np.array_equal(a, b)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.json")


class TestReplaceHead:
    def test_fan_in_validated(self):
        params, _ = tiny_params(14, (2, 6, 3))
        with pytest.raises(InvalidInputError):
            replace_head(params, np.zeros((5, 3)), np.zeros(3))

    def test_features_shared(self):
        params, _ = tiny_params(15, (2, 6, 3))
        new = replace_head(params, np.ones((6, 4)), np.zeros(4))
        assert new.weights[-1].shape == (6, 4)
        np.testing.assert_array_equal(new.weights[0], params.weights[0])
