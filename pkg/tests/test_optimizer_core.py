import math

import mpmath
import numpy as np
import pytest

from rescbm.data_io import BadMagicError
from rescbm.optimizer_core import (
    AdamState,
    LinearClassifier,
    RegularizerSpec,
    adam_step,
    cosine_backward,
    cosine_backward_rows,
    cross_entropy,
    elastic_net,
    finite_difference_check,
    forward,
    gradients,
    load_classifier,
    save_classifier,
    softmax,
)


class TestForward:
    def test_identity_weights(self):
        clf = LinearClassifier(np.eye(2), np.zeros(2))
        assert np.allclose(forward(clf, np.array([[1.0, 2.0]])), [[1.0, 2.0]])

    def test_zero_weights_bias_only(self):
        clf = LinearClassifier(np.zeros((2, 3)), np.array([3.0, -1.0]))
        out = forward(clf, np.random.default_rng(0).standard_normal((4, 3)))
        assert np.allclose(out, np.tile([3.0, -1.0], (4, 1)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        clf = LinearClassifier(rng.standard_normal((4, 6)), rng.standard_normal(4))
        x = rng.standard_normal((5, 6))
        out = forward(clf, x)
        for i in range(5):
            for k in range(4):
                expected = sum(x[i, j] * clf.weights[k, j] for j in range(6)) + clf.bias[k]
                assert abs(out[i, k] - expected) < 1e-12

    def test_width_mismatch(self):
        clf = LinearClassifier(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            forward(clf, np.ones((1, 3)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((3, 4))
        assert cross_entropy(logits, np.array([0, 1, 3])) == pytest.approx(math.log(4))

    def test_huge_logit_no_overflow(self):
        logits = np.array([[1000.0, 0.0]])
        assert cross_entropy(logits, np.array([0])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((20, 5)) * 3
        labels = rng.integers(0, 5, 20)
        with mpmath.workdps(50):
            total = mpmath.mpf(0)
            for i in range(20):
                row = [mpmath.mpf(float(v)) for v in logits[i]]
                norm = mpmath.log(mpmath.fsum(mpmath.e**v for v in row))
                total += norm - row[labels[i]]
            expected = float(total / 20)
        assert cross_entropy(logits, labels) == pytest.approx(expected, abs=1e-12)

    def test_shift_invariant_argmax(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((10, 4))
        shifted = logits + 1234.5
        assert np.array_equal(
            np.argmax(softmax(logits), axis=1), np.argmax(softmax(shifted), axis=1)
        )


class TestElasticNet:
    def test_zero_lambda(self):
        clf = LinearClassifier(np.array([[1.0, -2.0]]), np.zeros(1))
        assert elastic_net(clf, RegularizerSpec(lam=0.0)) == 0.0

    def test_pure_l1(self):
        clf = LinearClassifier(np.array([[1.0, -2.0]]), np.zeros(1))
        assert elastic_net(clf, RegularizerSpec(lam=1.0, l1_ratio=1.0)) == pytest.approx(3.0)

    def test_pure_l2(self):
        clf = LinearClassifier(np.array([[1.0, -2.0]]), np.zeros(1))
        assert elastic_net(clf, RegularizerSpec(lam=1.0, l1_ratio=0.0)) == pytest.approx(2.5)

    def test_bias_excluded(self):
        clf = LinearClassifier(np.zeros((1, 2)), np.array([100.0]))
        assert elastic_net(clf, RegularizerSpec(lam=1.0, l1_ratio=0.5)) == 0.0


class TestGradients:
    def test_perfect_prediction_near_zero(self):
        clf = LinearClassifier(np.array([[50.0], [-50.0]]), np.zeros(2))
        gw, gb, gx = gradients(clf, np.array([[1.0]]), np.array([0]), RegularizerSpec(lam=0.0))
        assert np.max(np.abs(gw)) < 1e-12
        assert np.max(np.abs(gb)) < 1e-12
        assert np.max(np.abs(gx)) < 1e-9

    def test_hand_derived_two_class_case(self):
        # one sample, scalar input: CE = log(1 + exp(z1 - z0)) for label 0,
        # so dCE/dw0 = -p1 x, dCE/dw1 = p1 x, dCE/dx = p1 (w1 - w0)
        x, w0, w1, b0, b1 = 0.7, 0.3, -0.4, 0.1, 0.2
        clf = LinearClassifier(np.array([[w0], [w1]]), np.array([b0, b1]))
        gw, gb, gx = gradients(clf, np.array([[x]]), np.array([0]), RegularizerSpec(lam=0.0))
        p1 = 1.0 / (1.0 + math.exp((w0 * x + b0) - (w1 * x + b1)))
        assert gw[0, 0] == pytest.approx(-p1 * x, abs=1e-12)
        assert gw[1, 0] == pytest.approx(p1 * x, abs=1e-12)
        assert gb[0] == pytest.approx(-p1, abs=1e-12)
        assert gb[1] == pytest.approx(p1, abs=1e-12)
        assert gx[0, 0] == pytest.approx(p1 * (w1 - w0), abs=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 3))
        labels = rng.integers(0, 4, 6)
        reg = RegularizerSpec(lam=1e-3, l1_ratio=0.4)
        w = rng.standard_normal((4, 3))
        w += np.sign(w) * 0.05  # keep the L1 term away from its kink
        b = rng.standard_normal(4)

        def loss_fn(params):
            clf = LinearClassifier(params["w"], params["b"])
            loss = cross_entropy(forward(clf, x), labels) + elastic_net(clf, reg)
            gw, gb, _ = gradients(clf, x, labels, reg)
            return loss, {"w": gw, "b": gb}

        err = finite_difference_check(loss_fn, {"w": w, "b": b}, h=1e-6)
        assert err < 1e-8

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        clf = LinearClassifier(rng.standard_normal((3, 4)), rng.standard_normal(3))
        x = rng.standard_normal((5, 4))
        labels = rng.integers(0, 3, 5)
        reg = RegularizerSpec(lam=0.0)

        def loss_fn(params):
            _, _, gx = gradients(clf, params["x"], labels, reg)
            return cross_entropy(forward(clf, params["x"]), labels), {"x": gx}

        err = finite_difference_check(loss_fn, {"x": x}, h=1e-6)
        assert err < 1e-8


class TestCosineBackward:
    def test_parallel_vectors_zero_gradient(self):
        u = np.array([2.0, 0.0])
        f = np.array([5.0, 0.0])
        assert np.allclose(cosine_backward(u, f, 1.0), 0.0, atol=1e-12)

    def test_orthogonal_unit_vectors(self):
        u = np.array([1.0, 0.0])
        f = np.array([0.0, 1.0])
        assert np.allclose(cosine_backward(u, f, 1.0), f)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        u = rng.standard_normal(5)
        f = rng.standard_normal(5)

        def loss_fn(params):
            uu = params["u"]
            cos = float(uu @ f) / (np.linalg.norm(uu) * np.linalg.norm(f))
            return cos, {"u": cosine_backward(uu, f, 1.0)}

        err = finite_difference_check(loss_fn, {"u": u}, h=1e-6)
        assert err < 1e-6

    def test_rows_variant_matches_per_sample_sum(self):
        rng = np.random.default_rng(7)
        vectors = rng.standard_normal((3, 4))
        feats = rng.standard_normal((6, 4))
        upstream = rng.standard_normal((6, 3))
        out = cosine_backward_rows(vectors, feats, upstream)
        for j in range(3):
            expected = np.zeros(4)
            for i in range(6):
                expected += cosine_backward(vectors[j], feats[i], upstream[i, j])
            assert np.allclose(out[j], expected, atol=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_backward(np.zeros(3), np.ones(3), 1.0)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        params = {"x": np.array([1.0, -1.0, 2.0])}
        grads = {"x": np.array([0.5, -3.0, 1e-3])}
        state = AdamState.for_params(params, learning_rate=0.1)
        out = adam_step(state, params, grads)
        expected = params["x"] - 0.1 * np.sign(grads["x"]) * (
            np.abs(grads["x"]) / (np.abs(grads["x"]) + state.eps)
        )
        assert np.allclose(out["x"], expected)
        assert state.step_count == 1

    def test_zero_gradients_keep_params(self):
        params = {"x": np.array([1.0, 2.0])}
        state = AdamState.for_params(params)
        for _ in range(10):
            params = adam_step(state, params, {"x": np.zeros(2)})
        assert np.array_equal(params["x"], [1.0, 2.0])

    def test_quadratic_descent(self):
        params = {"x": np.array([3.0, -2.0])}
        state = AdamState.for_params(params, learning_rate=0.05)
        losses = []
        for _ in range(200):
            losses.append(0.5 * float(params["x"] @ params["x"]))
            params = adam_step(state, params, {"x": params["x"]})
        assert losses[-1] < 1e-3 * losses[0]
        assert all(a > b for a, b in zip(losses[:20], losses[1:21]))


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        def loss_fn(params):
            x = params["x"]
            return 0.5 * float(x @ x), {"x": x}

        err = finite_difference_check(loss_fn, {"x": np.array([3.0])}, h=1e-5)
        assert err <= 1e-8

    def test_linear_exact(self):
        c = np.array([2.0, -1.0, 0.5])

        def loss_fn(params):
            return float(c @ params["x"]), {"x": c}

        err = finite_difference_check(loss_fn, {"x": np.array([1.0, 2.0, 3.0])}, h=1e-4)
        assert err < 1e-10

    def test_detects_wrong_gradient(self):
        def loss_fn(params):
            x = params["x"]
            return 0.5 * float(x @ x), {"x": 1.1 * x}

        err = finite_difference_check(loss_fn, {"x": np.array([3.0])}, h=1e-5)
        assert err > 1e-2


class TestClassifierContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        clf = LinearClassifier(
            rng.standard_normal((3, 5)).astype(np.float32).astype(np.float64),
            rng.standard_normal(3).astype(np.float32).astype(np.float64),
        )
        path = tmp_path / "c.clf"
        save_classifier(clf, path)
        loaded = load_classifier(path)
        assert np.array_equal(loaded.weights, clf.weights)
        assert np.array_equal(loaded.bias, clf.bias)

    def test_magic_distinct_from_embeddings(self, tmp_path):
        from rescbm.data_io import EmbeddingMatrix, save_embedding_matrix

        path = tmp_path / "m.emb"
        save_embedding_matrix(EmbeddingMatrix(np.ones((2, 2))), path)
        with pytest.raises(BadMagicError):
            load_classifier(path)
