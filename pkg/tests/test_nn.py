import math

import numpy as np
import pytest

from notedx import nn
from notedx.errors import InputError, ShapeError


def naive_conv(x, W, b):
    """Triple loop over (t, f, h); rows outside the input read as zero."""
    L, E = x.shape
    F, H, _ = W.shape
    front = math.ceil((H - 1) / 2)
    out = np.zeros((L, F))
    for t in range(L):
        for f in range(F):
            acc = b[f]
            for h in range(H):
                src = t + h - front
                if 0 <= src < L:
                    for e in range(E):
                        acc += W[f, h, e] * x[src, e]
            out[t, f] = acc
    return out


class TestEmbedding:
    def test_padding_rows_zero(self):
        table = np.arange(12.0).reshape(4, 3)
        out, _ = nn.embedding_lookup([0, 0], table)
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_permutation(self):
        out, _ = nn.embedding_lookup([2, 1], np.eye(3))
        assert np.array_equal(out, np.eye(3)[[2, 1]])

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            nn.embedding_lookup([3], np.eye(3))

    def test_sum_gradient_counts(self):
        ids = np.array([2, 1, 2, 0, 3, 2])
        table = np.random.default_rng(0).standard_normal((5, 4))
        _, cache = nn.embedding_lookup(ids, table)
        dtable = nn.embedding_backward(np.ones((6, 4)), cache)
        for r in range(5):
            expected = 0 if r == 0 else np.sum(ids == r)
            assert np.array_equal(dtable[r], np.full(4, float(expected)))

    def test_grad_check(self):
        rng = np.random.default_rng(1)
        ids = np.array([[1, 3, 0, 2], [2, 2, 4, 0]])
        table = rng.standard_normal((5, 3))
        err = nn.layer_grad_check(
            lambda table: nn.embedding_lookup(ids, table),
            lambda d, c: {"table": nn.embedding_backward(d, c)},
            {"table": table},
        )
        assert err < 1e-6


class TestConv:
    def test_zero_input_gives_bias(self):
        W = np.random.default_rng(0).standard_normal((3, 2, 4))
        b = np.array([0.5, -1.0, 2.0])
        out, _ = nn.conv1d_same(np.zeros((5, 4)), W, b, activation="identity")
        assert np.array_equal(out, np.tile(b, (5, 1)))

    def test_pointwise_scaling(self):
        out, _ = nn.conv1d_same(np.array([[1.0], [2.0], [3.0]]), np.array([[[2.0]]]), np.zeros(1), "identity")
        assert np.array_equal(out[:, 0], [2.0, 4.0, 6.0])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((7, 4))
        W = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal(2)
        out, _ = nn.conv1d_same(x, W, b, "identity")
        assert np.max(np.abs(out - naive_conv(x, W, b))) < 1e-12

    @pytest.mark.parametrize("H", [1, 2, 3, 4, 5, 6])
    def test_output_length_is_l(self, H):
        out, _ = nn.conv1d_same(np.ones((9, 2)), np.ones((3, H, 2)), np.zeros(3))
        assert out.shape == (9, 3)

    def test_batched_equals_per_document(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 6, 3))
        W, b = rng.standard_normal((5, 4, 3)), rng.standard_normal(5)
        batched, _ = nn.conv1d_same(x, W, b)
        for i in range(4):
            single, _ = nn.conv1d_same(x[i], W, b)
            np.testing.assert_allclose(batched[i], single, rtol=0, atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            nn.conv1d_same(np.ones((4, 3)), np.ones((1, 2, 2)), np.zeros(1))

    def test_linear_with_identity(self):
        rng = np.random.default_rng(3)
        W, b = rng.standard_normal((3, 3, 4)), np.zeros(3)
        for _ in range(50):
            x, y = rng.standard_normal((2, 8, 4))
            a, c = rng.standard_normal(2)
            lhs, _ = nn.conv1d_same(a * x + c * y, W, b, "identity")
            fx, _ = nn.conv1d_same(x, W, b, "identity")
            fy, _ = nn.conv1d_same(y, W, b, "identity")
            assert np.max(np.abs(lhs - (a * fx + c * fy))) < 1e-10

    def test_grad_check_identity(self):
        rng = np.random.default_rng(4)
        inputs = {"x": rng.standard_normal((6, 3)), "weights": rng.standard_normal((2, 3, 3)), "biases": rng.standard_normal(2)}
        err = nn.layer_grad_check(
            lambda x, weights, biases: nn.conv1d_same(x, weights, biases, "identity"),
            lambda d, c: dict(zip(("x", "weights", "biases"), nn.conv1d_same_backward(d, c))),
            inputs,
        )
        assert err < 1e-6

    def test_grad_check_relu_away_from_kink(self):
        eps = 1e-5
        rng = np.random.default_rng(7)
        for _ in range(100):
            inputs = {
                "x": rng.standard_normal((7, 4)),
                "weights": rng.standard_normal((3, 4, 4)),
                "biases": rng.standard_normal(3),
            }
            _, (_, pre, *_rest) = nn.conv1d_same(**inputs)
            if np.min(np.abs(pre)) > 10 * eps * 100:
                break
        err = nn.layer_grad_check(
            nn.conv1d_same,
            lambda d, c: dict(zip(("x", "weights", "biases"), nn.conv1d_same_backward(d, c))),
            inputs,
            eps=eps,
        )
        assert err < 1e-5


class TestMaxPool:
    def test_constant_column_first_index(self):
        out, (idx, _) = nn.max_pool_time(np.full((4, 1), 2.5))
        assert out[0] == 2.5 and idx[0] == 0

    def test_column(self):
        out, (idx, _) = nn.max_pool_time(np.array([[1.0], [5.0], [3.0]]))
        assert out[0] == 5.0 and idx[0] == 1

    def test_backward_routes_to_argmax(self):
        x = np.array([[1.0, 9.0], [5.0, 2.0], [3.0, 4.0]])
        _, cache = nn.max_pool_time(x)
        dx = nn.max_pool_time_backward(np.ones(2), cache)
        assert np.array_equal(dx, [[0, 1], [1, 0], [0, 0]])

    def test_output_is_column_max(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.standard_normal((rng.integers(1, 12), 5))
            out, _ = nn.max_pool_time(x)
            assert np.array_equal(out, x.max(axis=0))

    def test_grad_check(self):
        x = np.random.default_rng(3).standard_normal((3, 6, 4))
        err = nn.layer_grad_check(
            lambda x: nn.max_pool_time(x), lambda d, c: {"x": nn.max_pool_time_backward(d, c)}, {"x": x}
        )
        assert err < 1e-6


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        out, _ = nn.dense(x, np.eye(3), np.zeros(3))
        assert np.array_equal(out, x)

    def test_zero_input(self):
        b = np.array([1.0, 2.0])
        out, _ = nn.dense(np.zeros(3), np.ones((2, 3)), b)
        assert np.array_equal(out, b)

    def test_formula(self):
        rng = np.random.default_rng(1)
        W, b, x = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(3)
        out, _ = nn.dense(x, W, b)
        by_hand = [sum(W[k, f] * x[f] for f in range(3)) + b[k] for k in range(4)]
        np.testing.assert_allclose(out, by_hand, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.dense(np.zeros(2), np.ones((2, 3)), np.zeros(2))

    def test_grad_check(self):
        rng = np.random.default_rng(2)
        inputs = {"x": rng.standard_normal((5, 3)), "weights": rng.standard_normal((4, 3)), "biases": rng.standard_normal(4)}
        err = nn.layer_grad_check(
            nn.dense, lambda d, c: dict(zip(("x", "weights", "biases"), nn.dense_backward(d, c))), inputs
        )
        assert err < 1e-6


class TestDropout:
    def test_infer_identity(self):
        x = np.random.default_rng(0).standard_normal(10)
        out, _ = nn.dropout(x, 0.5, train=False)
        assert out is x

    def test_keep_one_identity(self):
        x = np.arange(5.0)
        out, _ = nn.dropout(x, 1.0, train=True, rng=np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_kept_fraction(self):
        out, _ = nn.dropout(np.ones(100_000), 0.5, True, np.random.default_rng(123))
        assert 0.49 <= np.mean(out != 0) <= 0.51

    def test_expectation(self):
        x = np.random.default_rng(1).uniform(0.5, 2.0, 20)
        rng = np.random.default_rng(2)
        mean = np.mean([nn.dropout(x, 0.5, True, rng)[0] for _ in range(10_000)], axis=0)
        assert np.all(np.abs(mean - x) <= 0.02 * np.abs(x) + 0.02)

    def test_backward_uses_mask(self):
        x = np.ones(50)
        out, mask = nn.dropout(x, 0.3, True, np.random.default_rng(0))
        assert np.array_equal(nn.dropout_backward(np.ones(50), mask), out)

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
    def test_range(self, p):
        with pytest.raises(InputError):
            nn.dropout(np.ones(3), p, True, np.random.default_rng(0))


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        assert np.allclose(nn.softmax(np.zeros(4)), 0.25, rtol=0, atol=1e-15)

    def test_large_logits(self):
        p = nn.softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300

    def test_closed_form(self):
        p = nn.softmax(np.log(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(p, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-15)

    def test_normalization_property(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1e3, 1e3, size=(10_000, 7))
        x[::3] = rng.standard_normal((len(x[::3]), 7))
        p = nn.softmax(x)
        assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12
        assert np.all(p <= 1.0)
        # exp underflows for gaps beyond ~745, so strict positivity is
        # checked where the logit spread is representable
        spread = x.max(axis=1) - x.min(axis=1)
        assert np.all(p[spread < 700] > 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1000, 5)) * 10
        c = rng.uniform(-100, 100, size=(1000, 1))
        assert np.max(np.abs(nn.softmax(x + c) - nn.softmax(x))) < 1e-12

    def test_ce_perfect(self):
        assert nn.cross_entropy(np.array([0, 1, 0]), np.array([0.0, 1.0, 0.0])) == 0.0

    def test_ce_uniform(self):
        y = np.eye(10)[3]
        assert nn.cross_entropy(y, np.full(10, 0.1)) == pytest.approx(2.302585, abs=1e-6)

    def test_ce_rejects_non_one_hot(self):
        with pytest.raises(InputError):
            nn.cross_entropy(np.array([0.5, 0.5]), np.array([0.5, 0.5]))

    def test_gradient_is_pi_minus_y(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            logits = rng.standard_normal(6)
            y = np.eye(6)[rng.integers(6)]
            loss, grad = nn.softmax_cross_entropy(logits, y)
            assert loss == pytest.approx(nn.cross_entropy(y, nn.softmax(logits)), abs=1e-14)
            np.testing.assert_allclose(grad, nn.softmax(logits) - y, atol=1e-15)
            err = nn.grad_check(
                lambda p: (lambda lg: (lg[0], {"logits": lg[1]}))(nn.softmax_cross_entropy(p["logits"], y)),
                {"logits": logits},
            )
            assert err < 1e-6


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = nn.Adam()
        opt.step(params, {"w": np.zeros(2)})
        assert np.array_equal(params["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        # after one step m_hat = g and v_hat = g^2, so the step is
        # -lr * g / (|g| + eps)
        g = np.array([0.3, -4.0, 1e-3])
        params = {"w": np.zeros(3)}
        nn.Adam(lr=1e-4).step(params, {"w": g.copy()})
        expected = -1e-4 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(params["w"], expected, rtol=1e-12)
        assert np.allclose(np.abs(params["w"]), 1e-4, rtol=1e-4)

    def test_quadratic_monotone(self):
        params = {"w": np.array([5.0])}
        opt = nn.Adam(lr=0.05)
        losses = []
        for _ in range(60):
            losses.append(float(params["w"][0] ** 2))
            opt.step(params, {"w": 2 * params["w"]})
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})
