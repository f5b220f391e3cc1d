"""Tape mechanics and gradient rules for every op kind."""

import numpy as np
import pytest

import viewsplat.autodiff as ad
from viewsplat.autodiff import Tape, Value, backward, constant, finite_difference_check


def fd_scalar(f, theta, coords=None, tol=1e-5):
    """Run the built-in checker and assert the sweep stays under tol."""
    res = finite_difference_check(f, theta, step=1e-5, coords=coords)
    assert not res.failed, f"non-finite probes at coords {res.failed}"
    assert res.max_rel_error < tol, res
    return res


class TestTapeMechanics:
    def test_record_mul_example(self):
        t = Tape()
        a = t.leaf(2.0)
        b = t.leaf(3.0)
        out = ad.record("mul", a, b)
        assert out.data == 6.0
        backward(out)
        assert a.grad == 3.0
        assert b.grad == 2.0

    def test_fanout_accumulates(self):
        # y = x*x + x*x has gradient 4x
        t = Tape()
        x = t.leaf(3.0)
        y = x * x + x * x
        backward(y)
        assert x.grad == 12.0

    def test_backward_non_scalar_rejected(self):
        t = Tape()
        x = t.leaf(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0)

    def test_backward_visits_each_node_once(self):
        # diamond graph: z = (x+y) * (x+y) with the same intermediate reused
        t = Tape()
        x = t.leaf(1.5)
        s = x + 2.0
        z = s * s
        backward(z)
        assert x.grad == pytest.approx(2.0 * 3.5)

    def test_two_backwards_after_reset_identical(self):
        rng = np.random.default_rng(0)
        t = Tape()
        x = t.leaf(rng.normal(size=(4, 3)))
        y = (ad.exp(x) * ad.sigmoid(x)).sum()
        backward(y)
        g1 = x.grad.copy()
        t.zero_grad()
        backward(y)
        assert np.array_equal(g1, x.grad)

    def test_constants_record_nothing(self):
        a = constant(np.ones((2, 2)))
        b = constant(np.ones((2, 2)))
        out = a @ b + a * 3.0
        assert out.tape is None
        assert out.grad is None

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(1.0)
        b = t2.leaf(1.0)
        with pytest.raises(ValueError, match="tapes"):
            a + b

    def test_shape_mismatch_diagnostic_names_op(self):
        t = Tape()
        a = t.leaf(np.ones((2, 3)))
        b = t.leaf(np.ones((4,)))
        with pytest.raises(ValueError, match="mul"):
            a * b

    def test_grad_through_constant_is_dropped(self):
        t = Tape()
        x = t.leaf(2.0)
        c = constant(5.0)
        y = x * c
        backward(y)
        assert x.grad == 5.0
        assert c.grad is None

    def test_leaf_gradient_map_returned(self):
        t = Tape()
        a = t.leaf(1.0)
        b = t.leaf(2.0)
        grads = backward(a * b)
        assert grads[a] == 2.0
        assert grads[b] == 1.0


class TestWorkedExamples:
    def test_matmul_identity_passthrough(self):
        t = Tape()
        a = t.leaf(np.eye(3))
        b = t.leaf(np.arange(9.0).reshape(3, 3))
        out = (a @ b).sum()
        backward(out)
        assert np.allclose(b.grad, np.ones((3, 3)))

    def test_relu_dead_region_zero_grad(self):
        t = Tape()
        x = t.leaf(np.array([-2.0, -0.5, 0.0, 0.5]))
        backward(ad.relu(x).sum())
        assert np.array_equal(x.grad, [0.0, 0.0, 0.0, 1.0])

    def test_maxpool_tie_lowest_index(self):
        t = Tape()
        x = t.leaf(np.array([[1.0, 3.0, 3.0, 2.0]]))
        backward(ad.reduce_max(x, axis=1).sum())
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_clamp_boundary_subgradient_zero(self):
        t = Tape()
        x = t.leaf(np.array([0.0, 0.5, 0.99, 1.5]))
        backward(ad.clamp(x, 0.0, 0.99).sum())
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])

    def test_abs_subgradient_zero_at_zero(self):
        t = Tape()
        x = t.leaf(np.array([-1.0, 0.0, 2.0]))
        backward(ad.absval(x).sum())
        assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_maximum_tie_routes_to_first(self):
        t = Tape()
        a = t.leaf(np.array([1.0, 2.0]))
        b = t.leaf(np.array([1.0, 1.0]))
        backward(ad.maximum(a, b).sum())
        assert np.array_equal(a.grad, [1.0, 1.0])
        assert np.array_equal(b.grad, [0.0, 0.0])


class TestFiniteDifferencePerOp:
    """Randomized central-difference probes, 10 points per op."""

    rng = np.random.default_rng(42)

    def test_elementwise_binary(self):
        x = self.rng.uniform(0.5, 2.0, size=10)
        y = self.rng.uniform(0.5, 2.0, size=10)
        fd_scalar(lambda v: (v * constant(y)).sum(), x)
        fd_scalar(lambda v: (v + constant(y) * 2.0 - v * v).sum(), x)
        fd_scalar(lambda v: (constant(y) / v).sum(), x)
        fd_scalar(lambda v: (v / constant(y)).sum(), x)

    def test_unary_chain(self):
        x = self.rng.uniform(0.5, 1.5, size=10)
        fd_scalar(lambda v: ad.exp(v).sum(), x)
        fd_scalar(lambda v: ad.log(v).sum(), x)
        fd_scalar(lambda v: ad.sqrt(v).sum(), x)
        fd_scalar(lambda v: ad.power(v, 3.0).sum(), x)
        fd_scalar(lambda v: ad.neg(v).sum(), x)
        fd_scalar(lambda v: ad.sigmoid(v).sum(), x)
        fd_scalar(lambda v: ad.relu(v - 1.0).sum(), x)
        fd_scalar(lambda v: ad.absval(v - 1.0).sum(), x)

    def test_broadcasting_grads(self):
        x = self.rng.normal(size=(3, 1))
        other = constant(self.rng.normal(size=(3, 4)))
        fd_scalar(lambda v: (v * other).sum(), x)
        b = self.rng.normal(size=(4,))
        fd_scalar(lambda v: (other + v).sum(), b)

    def test_matmul(self):
        a = self.rng.normal(size=(4, 3))
        bconst = constant(self.rng.normal(size=(3, 5)))
        fd_scalar(lambda v: (v @ bconst).sum(), a)
        b = self.rng.normal(size=(3, 5))
        aconst = constant(self.rng.normal(size=(4, 3)))
        fd_scalar(lambda v: (aconst @ v).sum(), b)

    def test_matmul_batched(self):
        a = self.rng.normal(size=(6, 2, 3))
        bconst = constant(self.rng.normal(size=(6, 3, 2)))
        fd_scalar(lambda v: (v @ bconst).sum(), a)
        fd_scalar(lambda v: (bconst @ v).sum(), a)

    def test_dot_and_norm(self):
        x = self.rng.normal(size=6)
        fd_scalar(lambda v: ad.dot(v, constant(np.arange(6.0))), x)
        fd_scalar(lambda v: ad.l2norm(v), x)
        m = self.rng.normal(size=(5, 3)) + 2.0
        fd_scalar(lambda v: ad.l2norm(v, axis=1).sum(), m)
        fd_scalar(lambda v: ad.l2norm(v, axis=1, keepdims=True).sum(), m)

    def test_reductions(self):
        x = self.rng.normal(size=(4, 5))
        fd_scalar(lambda v: v.sum(), x)
        fd_scalar(lambda v: v.sum(axis=0).sum(), x)
        fd_scalar(lambda v: v.mean(), x)
        fd_scalar(lambda v: (v.mean(axis=1, keepdims=True) * 3.0).sum(), x)
        fd_scalar(lambda v: ad.reduce_max(v, axis=0).sum(), x)
        fd_scalar(lambda v: ad.reduce_max(v, axis=1, keepdims=True).sum(), x)

    def test_cumsum(self):
        x = self.rng.normal(size=(5, 3))
        w = constant(self.rng.normal(size=(5, 3)))
        fd_scalar(lambda v: (ad.cumsum(v, axis=0) * w).sum(), x)
        fd_scalar(lambda v: (ad.cumsum(v, axis=0, exclusive=True) * w).sum(), x)
        fd_scalar(lambda v: (ad.cumsum(v, axis=1) * w).sum(), x)
        fd_scalar(lambda v: (ad.cumsum(v, axis=1, exclusive=True) * w).sum(), x)

    def test_cumsum_exclusive_forward(self):
        out = ad.cumsum(constant([1.0, 2.0, 3.0]), axis=0, exclusive=True)
        assert np.array_equal(out.data, [0.0, 1.0, 3.0])

    def test_shape_ops(self):
        x = self.rng.normal(size=(2, 6))
        w = constant(self.rng.normal(size=(3, 4)))
        fd_scalar(lambda v: (ad.reshape(v, (3, 4)) * w).sum(), x)
        wt = constant(self.rng.normal(size=(6, 2)))
        fd_scalar(lambda v: (ad.transpose(v, (1, 0)) * wt).sum(), x)
        xb = self.rng.normal(size=(1, 6))
        wb = constant(self.rng.normal(size=(4, 6)))
        fd_scalar(lambda v: (ad.broadcast_to(v, (4, 6)) * wb).sum(), xb)

    def test_concat_stack_slice(self):
        x = self.rng.normal(size=(3, 4))
        w = constant(self.rng.normal(size=(6, 4)))
        fd_scalar(lambda v: (ad.concat([v, v * 2.0], axis=0) * w).sum(), x)
        ws = constant(self.rng.normal(size=(2, 3, 4)))
        fd_scalar(lambda v: (ad.stack([v, v * v], axis=0) * ws).sum(), x)
        fd_scalar(lambda v: (v[1:, ::2] * 3.0).sum(), x)
        fd_scalar(lambda v: v[0, 0] * 2.0, x)

    def test_take_ops(self):
        x = self.rng.normal(size=(5, 3))
        idx = np.array([0, 2, 2, 4])  # duplicate rows must accumulate
        w = constant(self.rng.normal(size=(4, 3)))
        fd_scalar(lambda v: (ad.take(v, idx, axis=0) * w).sum(), x)
        ia = self.rng.integers(0, 5, size=(2, 3))
        wa = constant(self.rng.normal(size=(2, 3)))
        fd_scalar(lambda v: (ad.take_along(v, ia, axis=0) * wa).sum(), x)

    def test_conv2d(self):
        x = self.rng.normal(size=(5, 6, 2))
        k = self.rng.normal(size=(3, 3, 2, 4)) * 0.3
        b = self.rng.normal(size=4) * 0.1
        wout = constant(self.rng.normal(size=(5, 6, 4)))
        fd_scalar(lambda v: (ad.conv2d(v, constant(k), constant(b)) * wout).sum(), x)
        fd_scalar(lambda v: (ad.conv2d(constant(x), v, constant(b)) * wout).sum(), k)
        fd_scalar(lambda v: (ad.conv2d(constant(x), constant(k), v) * wout).sum(), b)

    def test_conv2d_matches_naive_loops(self):
        x = self.rng.normal(size=(6, 7, 3))
        k = self.rng.normal(size=(3, 3, 3, 2))
        out = ad.conv2d(constant(x), constant(k)).data
        h, w, _ = x.shape
        kh, kw, cin, cout = k.shape
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros((h, w, cout))
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    acc = 0.0
                    for a in range(kh):
                        for b in range(kw):
                            for c in range(cin):
                                acc += xp[i + a, j + b, c] * k[a, b, c, o]
                    ref[i, j, o] = acc
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_filter2d(self):
        x = self.rng.normal(size=(6, 5, 3))
        kern = self.rng.normal(size=(3, 5))
        w = constant(self.rng.normal(size=(6, 5, 3)))
        fd_scalar(lambda v: (ad.filter2d(v, kern) * w).sum(), x)
        x2 = self.rng.normal(size=(6, 5))
        w2 = constant(self.rng.normal(size=(6, 5)))
        fd_scalar(lambda v: (ad.filter2d(v, kern) * w2).sum(), x2)

    def test_clamp_interior(self):
        x = self.rng.uniform(-2.0, 2.0, size=20)
        # keep probes away from the clamp corners so the FD step stays one-sided
        x = x[(np.abs(x - 1.0) > 1e-3) & (np.abs(x + 1.0) > 1e-3)]
        fd_scalar(lambda v: ad.clamp(v, -1.0, 1.0).sum(), x)

    def test_where_mask(self):
        x = self.rng.normal(size=8)
        m = self.rng.random(8) > 0.5
        fd_scalar(lambda v: ad.where_mask(m, v * 2.0, v * v).sum(), x)

    def test_mask_values(self):
        x = self.rng.normal(size=8)
        m = self.rng.random(8) > 0.5
        fd_scalar(lambda v: (ad.mask_values(m, v * v) * 3.0).sum(), x)

    def test_mask_values_kills_nonfinite_lanes(self):
        # the whole point of the op: a poisoned lane must not leak NaN into
        # either the forward value or the gradients of surviving lanes
        t = Tape()
        v = t.leaf(np.array([1.0, 2.0, 3.0]))
        m = np.array([True, False, True])
        with np.errstate(invalid="ignore"):
            poisoned = ad.log(v + np.array([0.0, -5.0, 0.0]))  # lane 1 is NaN
            out = ad.mask_values(m, poisoned)
        assert np.isnan(poisoned.data[1])
        np.testing.assert_allclose(out.data, [0.0, 0.0, np.log(3.0)])
        backward((out * np.array([2.0, 5.0, 7.0])).sum())
        np.testing.assert_allclose(v.grad, [2.0, 0.0, 7.0 / 3.0])


class TestLinearity:
    def test_grad_of_linear_combination(self):
        # d/dx of (2f + 3g) equals 2 df/dx + 3 dg/dx
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=6)

        def f(v):
            return (v * v).sum()

        def g(v):
            return ad.exp(v * 0.3).sum()

        def run(fn):
            t = Tape()
            v = t.leaf(x0)
            backward(fn(v))
            return v.grad.copy()

        gf = run(f)
        gg = run(g)
        gcomb = run(lambda v: 2.0 * f(v) + 3.0 * g(v))
        np.testing.assert_allclose(gcomb, 2.0 * gf + 3.0 * gg, rtol=1e-12)


class TestCheckerUtility:
    def test_quadratic_max_error_tiny(self):
        res = finite_difference_check(lambda v: (v * v).sum(), np.array([1.0, -2.0, 3.0]))
        assert res.max_rel_error < 1e-9

    def test_nonfinite_probe_reported_failed(self):
        res = finite_difference_check(lambda v: ad.log(v).sum(), np.array([1e-6]))
        assert res.failed == [0]
        assert res.max_rel_error == np.inf

    def test_negligible_coordinates_skipped(self):
        def f(v):
            return (v[1:] ** 2.0).sum()  # coordinate 0 is structurally dead

        res = finite_difference_check(
            f, np.array([5.0, 1.0, 2.0]), negligible_below=1e-7
        )
        assert res.skipped == [0]
        assert res.max_rel_error < 1e-9
