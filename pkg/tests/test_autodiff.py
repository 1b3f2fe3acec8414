"""Tape engine: per-primitive gradient checks against central differences."""

import numpy as np
import pytest

from picirc import autodiff as ad
from picirc.autodiff import Tape


def value_and_grads(build, params):
    tape, loss = build(params)
    return float(loss.data), tape.backward(loss)


def finite_diff(build, params, h=1e-4):
    grads = {}
    for name, val in params.items():
        g = np.zeros_like(val)
        flat = val.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fplus, _ = value_and_grads(build, params)
            flat[i] = orig - h
            fminus, _ = value_and_grads(build, params)
            flat[i] = orig
            gflat[i] = (fplus - fminus) / (2 * h)
        grads[name] = g
    return grads


def check_grads(build, params, tol=1e-4):
    _, got = value_and_grads(build, params)
    want = finite_diff(build, params)
    assert set(got) == set(want)
    for name in want:
        rel = np.abs(got[name] - want[name]) / np.maximum(1.0, np.abs(want[name]))
        assert rel.max() < tol, (name, rel.max())


def scalarize(tape, node, rng):
    """Project a tensor node to a scalar with a fixed random direction."""
    proj = tape.const(rng.uniform(-1, 1, size=node.shape))
    return ad.reduce_sum(ad.multiply(node, proj))


class TestPrimitiveGradients:
    def _check_unary(self, op, x0):
        rng = np.random.default_rng(0)

        def build(p):
            t = Tape()
            x = t.param("x", p["x"])
            return t, scalarize(t, op(x), np.random.default_rng(1))

        check_grads(build, {"x": np.asarray(x0, dtype=np.float64)})

    def test_sin(self):
        self._check_unary(ad.sin, [[0.3, -1.2], [2.5, 0.0]])

    def test_cos(self):
        self._check_unary(ad.cos, [[0.3, -1.2], [2.5, 0.0]])

    def test_exp(self):
        self._check_unary(ad.exp, [[0.3, -1.2], [1.5, 0.0]])

    def test_log(self):
        self._check_unary(ad.log, [[0.3, 1.2], [2.5, 4.0]])

    def test_softplus(self):
        self._check_unary(ad.softplus, [[-30.0, -1.2], [2.5, 30.0]])

    def test_sigmoid(self):
        self._check_unary(ad.sigmoid, [[-30.0, -1.2], [2.5, 30.0]])

    def test_tanh(self):
        self._check_unary(ad.tanh, [[-3.0, -1.2], [2.5, 3.0]])

    def test_neg(self):
        self._check_unary(ad.neg, [[1.0, -2.0]])

    def test_reshape(self):
        self._check_unary(lambda x: ad.reshape(x, (3, 2, 1)), [[1.0, -2.0, 0.5], [0.1, 4.0, -1.0]])

    def test_add_broadcast(self):
        def build(p):
            t = Tape()
            a = t.param("a", p["a"])
            b = t.param("b", p["b"])
            return t, scalarize(t, ad.add(a, b), np.random.default_rng(2))

        check_grads(build, {"a": np.ones((3, 4)), "b": np.arange(4.0)})

    def test_multiply_broadcast(self):
        def build(p):
            t = Tape()
            a = t.param("a", p["a"])
            b = t.param("b", p["b"])
            return t, scalarize(t, ad.multiply(a, b), np.random.default_rng(3))

        rng = np.random.default_rng(4)
        check_grads(build, {"a": rng.uniform(-1, 1, (2, 3, 4)), "b": rng.uniform(-1, 1, (3, 1))})

    @pytest.mark.parametrize(
        "sa,sb", [((3, 4), (4, 2)), ((3, 4), (4,)), ((3,), (3, 2)), ((3,), (3,))]
    )
    def test_matmul_shapes(self, sa, sb):
        rng = np.random.default_rng(5)

        def build(p):
            t = Tape()
            a = t.param("a", p["a"])
            b = t.param("b", p["b"])
            return t, scalarize(t, ad.matmul(a, b), np.random.default_rng(6))

        check_grads(build, {"a": rng.uniform(-1, 1, sa), "b": rng.uniform(-1, 1, sb)})

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), (2, False)])
    def test_logsumexp(self, axis, keepdims):
        rng = np.random.default_rng(7)

        def build(p):
            t = Tape()
            x = t.param("x", p["x"])
            out = ad.logsumexp(x, axis=axis, keepdims=keepdims)
            return t, scalarize(t, out, np.random.default_rng(8))

        check_grads(build, {"x": rng.uniform(-2, 2, (2, 3, 4))})

    def test_gather_with_duplicate_indices(self):
        rng = np.random.default_rng(9)

        def build(p):
            t = Tape()
            x = t.param("x", p["x"])
            out = ad.gather(x, np.array([0, 2, 2, 4]), axis=0)
            return t, scalarize(t, out, np.random.default_rng(10))

        check_grads(build, {"x": rng.uniform(-1, 1, (5, 3))})

    def test_gather_axis1(self):
        rng = np.random.default_rng(11)

        def build(p):
            t = Tape()
            x = t.param("x", p["x"])
            out = ad.gather(x, np.array([1, 1, 0]), axis=1)
            return t, scalarize(t, out, np.random.default_rng(12))

        check_grads(build, {"x": rng.uniform(-1, 1, (2, 3))})

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_reduce_sum(self, axis, keepdims):
        rng = np.random.default_rng(13)

        def build(p):
            t = Tape()
            x = t.param("x", p["x"])
            out = ad.reduce_sum(x, axis=axis, keepdims=keepdims)
            return t, scalarize(t, out, np.random.default_rng(14))

        check_grads(build, {"x": rng.uniform(-1, 1, (3, 4))})

    def test_mean(self):
        rng = np.random.default_rng(15)

        def build(p):
            t = Tape()
            x = t.param("x", p["x"])
            return t, ad.mean(x)

        check_grads(build, {"x": rng.uniform(-1, 1, (6,))})

    def test_interleave(self):
        rng = np.random.default_rng(16)

        def build(p):
            t = Tape()
            a = t.param("a", p["a"])
            b = t.param("b", p["b"])
            return t, scalarize(t, ad.interleave(a, b), np.random.default_rng(17))

        check_grads(build, {"a": rng.uniform(-1, 1, (2, 3)), "b": rng.uniform(-1, 1, (2, 3))})


class TestKnownIdentities:
    def test_linear_gradient_is_input(self):
        x = np.array([1.5, -2.0, 0.25])
        t = Tape()
        w = t.param("w", np.array([0.1, 0.2, 0.3]))
        loss = ad.reduce_sum(ad.multiply(w, t.const(x)))
        grads = t.backward(loss)
        np.testing.assert_allclose(grads["w"], x)

    def test_logsumexp_gradient_is_softmax(self):
        v = np.array([0.5, -1.0, 2.0, 0.0])
        t = Tape()
        w = t.param("v", v)
        grads = t.backward(ad.logsumexp(w))
        soft = np.exp(v) / np.exp(v).sum()
        np.testing.assert_allclose(grads["v"], soft, atol=1e-12)

    def test_logsumexp_all_neg_inf(self):
        t = Tape()
        x = t.const(np.full(3, -np.inf))
        out = ad.logsumexp(x)
        assert np.isneginf(out.data)

    def test_logsumexp_partial_neg_inf_grad(self):
        t = Tape()
        v = t.param("v", np.array([-np.inf, 0.0, 1.0]))
        grads = t.backward(ad.logsumexp(v))
        assert np.isfinite(grads["v"]).all()
        assert grads["v"][0] == 0.0

    def test_composed_net_gradcheck(self):
        rng = np.random.default_rng(18)
        params = {
            "w1": rng.normal(0, 0.5, (4, 5)),
            "b1": rng.normal(0, 0.5, 5),
            "w2": rng.normal(0, 0.5, (5, 1)),
        }
        x = rng.uniform(-1, 1, (7, 4))

        def build(p):
            t = Tape()
            w1 = t.param("w1", p["w1"])
            b1 = t.param("b1", p["b1"])
            w2 = t.param("w2", p["w2"])
            h = ad.tanh(ad.add(ad.matmul(t.const(x), w1), b1))
            out = ad.softplus(ad.matmul(h, w2))
            return t, ad.mean(ad.reshape(out, (7,)))

        check_grads(build, params)


class TestTapeContract:
    def test_unregistered_primitive_fails_loudly(self):
        t = Tape()
        x = t.param("x", np.ones(3))
        with pytest.raises(NotImplementedError, match="mystery"):
            t.record("mystery", x.data * 2, (x,), None)

    def test_non_scalar_loss_rejected(self):
        t = Tape()
        x = t.param("x", np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            t.backward(ad.multiply(x, x))

    def test_duplicate_param_name_rejected(self):
        t = Tape()
        t.param("x", np.ones(3))
        with pytest.raises(ValueError, match="already registered"):
            t.param("x", np.ones(3))

    def test_unused_param_gets_zero_gradient(self):
        t = Tape()
        used = t.param("used", np.array(2.0))
        t.param("unused", np.ones(4))
        grads = t.backward(ad.multiply(used, used))
        np.testing.assert_allclose(grads["unused"], np.zeros(4))
        assert grads["used"] == pytest.approx(4.0)

    def test_constants_never_in_gradient_map(self):
        t = Tape()
        w = t.param("w", np.array([1.0, 2.0]))
        c = t.const(np.array([3.0, 4.0]))
        grads = t.backward(ad.reduce_sum(ad.multiply(w, c)))
        assert set(grads) == {"w"}

    def test_operator_sugar(self):
        t = Tape()
        a = t.param("a", np.array(3.0))
        loss = a * 2.0 + 1.0 - a
        grads = t.backward(loss)
        assert grads["a"] == pytest.approx(1.0)
        assert loss.data == pytest.approx(4.0)

    def test_cross_tape_loss_rejected(self):
        t1, t2 = Tape(), Tape()
        x = t1.param("x", np.array(1.0))
        with pytest.raises(ValueError, match="different tape"):
            t2.backward(x)
