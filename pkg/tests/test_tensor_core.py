import math

import mpmath
import numpy as np
import pytest

from latentdemand import tensor_core as tc
from latentdemand.errors import NumericalError, ValidationError

from conftest import finite_diff_grad, grad_errors


def check_op_gradient(op, shapes, seed, eps=1e-5, tol=1e-4, low=-2.0, high=2.0):
    """FD-check d(sum(op(xs)))/dx for every input against central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(low, high, size=s) for s in shapes]
    for which in range(len(arrays)):
        def scalar_fn(x):
            args = [tc.as_tensor(a) for a in arrays]
            args[which] = tc.as_tensor(x)
            return tc.sum_(op(*args)).item()

        t_args = [tc.parameter(a.copy()) for a in arrays]
        loss = tc.sum_(op(*t_args))
        tc.backward(loss)
        numeric = finite_diff_grad(scalar_fn, arrays[which].copy(), eps)
        analytic = t_args[which].grad
        assert analytic is not None
        rel, n_checked, _ = grad_errors(analytic, numeric)
        assert n_checked > 0
        assert rel.max() < tol, f"input {which}: max rel err {rel.max():.2e}"


class TestElementwiseValues:
    def test_relu_values(self):
        out = tc.relu(tc.as_tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_tanh_zero(self):
        assert tc.sigmoid(tc.as_tensor(0.0)).item() == 0.5
        assert tc.tanh(tc.as_tensor(0.0)).item() == 0.0

    def test_softplus_asymptote(self):
        assert tc.softplus(tc.as_tensor(50.0)).item() == pytest.approx(50.0, abs=1e-12)

    def test_softplus_ordinary_value(self):
        assert tc.softplus(tc.as_tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_softplus_very_negative(self):
        assert tc.softplus(tc.as_tensor(-40.0)).item() == pytest.approx(math.exp(-40.0), rel=1e-9)

    def test_shape_mismatch_named(self):
        with pytest.raises(ValidationError, match="shape"):
            tc.matmul(tc.as_tensor(np.zeros((2, 3))), tc.as_tensor(np.zeros((2, 3))))


class TestOpGradients:
    # Per-op invariant: reverse-mode matches central finite differences on
    # random small tensors.
    CASES = [
        ("add", lambda a, b: tc.add(a, b), [(3, 4), (3, 4)]),
        ("add_broadcast", lambda a, b: tc.add(a, b), [(3, 4), (4,)]),
        ("sub", lambda a, b: tc.sub(a, b), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: tc.mul(a, b), [(3, 4), (3, 4)]),
        ("div", lambda a, b: tc.div(a, tc.add(b, 3.0)), [(3, 4), (3, 4)]),
        ("neg", lambda a: tc.neg(a), [(5,)]),
        ("square", lambda a: tc.square(a), [(4, 2)]),
        ("matmul2d", lambda a, b: tc.matmul(a, b), [(3, 4), (4, 2)]),
        ("matmul_adj", lambda a, b: tc.matmul(a, b), [(3, 3), (5, 3, 2)]),
        ("matmul_fold", lambda a, b: tc.matmul(a, b), [(5, 3, 4), (4, 2)]),
        ("sigmoid", lambda a: tc.sigmoid(a), [(6,)]),
        ("tanh", lambda a: tc.tanh(a), [(6,)]),
        ("softplus", lambda a: tc.softplus(a), [(6,)]),
        ("exp", lambda a: tc.exp(a), [(6,)]),
        ("mean_axis", lambda a: tc.mean(a, axis=0), [(5, 3)]),
        ("mean_all", lambda a: tc.square(tc.mean(a)), [(5, 3)]),
        ("concat", lambda a, b: tc.square(tc.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
        ("reshape", lambda a: tc.square(tc.reshape(a, (6,))), [(2, 3)]),
        ("take_col", lambda a: tc.square(a[:, 1]), [(4, 3)]),
        ("maximum", lambda a, b: tc.maximum(a, b), [(4, 3), (4, 3)]),
    ]

    @pytest.mark.parametrize("name,op,shapes", CASES, ids=[c[0] for c in CASES])
    def test_gradient(self, name, op, shapes):
        for seed in range(5):
            check_op_gradient(op, shapes, seed=seed)

    def test_log_gradient(self):
        check_op_gradient(lambda a: tc.log(a), [(6,)], seed=0, low=0.5, high=3.0)

    def test_many_random_elementwise(self):
        # 100 random small tensors through a mixed composite.
        def comp(a):
            return tc.mul(tc.sigmoid(a), tc.tanh(tc.square(a)))

        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = rng.uniform(-2, 2, size=(3,))
            t = tc.parameter(x.copy())
            tc.backward(tc.sum_(comp(t)))
            numeric = finite_diff_grad(lambda v: tc.sum_(comp(tc.as_tensor(v))).item(), x.copy())
            rel, n, _ = grad_errors(t.grad, numeric)
            if n:
                assert rel.max() < 1e-4


class TestKinkConventions:
    def test_relu_zero_at_kink(self):
        x = tc.parameter(np.array([0.0, -1.0, 2.0]))
        tc.backward(tc.sum_(tc.relu(x)))
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_maximum_const_sides_and_tie(self):
        x = tc.parameter(np.array([-1.0, 1.0, 0.5]))
        tc.backward(tc.sum_(tc.maximum_const(x, 0.5)))
        # constant side 0, variable side 1, exact tie 0
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_minimum_const_sides_and_tie(self):
        x = tc.parameter(np.array([-1.0, 1.0, 0.5]))
        tc.backward(tc.sum_(tc.minimum_const(x, 0.5)))
        assert np.array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_maximum_tensor_tie_gets_zero(self):
        a = tc.parameter(np.array([1.0, 2.0]))
        b = tc.parameter(np.array([1.0, 0.0]))
        tc.backward(tc.sum_(tc.maximum(a, b)))
        assert np.array_equal(a.grad, [0.0, 1.0])
        assert np.array_equal(b.grad, [0.0, 0.0])


def gaussian_oracle(kind, y, mu, sigma):
    mpmath.mp.dps = 40
    z = (mpmath.mpf(y) - mpmath.mpf(mu)) / mpmath.mpf(sigma)
    if kind == "pdf":
        return float(mpmath.npdf(z, 0, 1) / sigma)
    if kind == "cdf":
        return float(mpmath.ncdf(z, 0, 1))
    return float(mpmath.log(mpmath.erfc(z / mpmath.sqrt(2)) / 2))


class TestGaussianTerms:
    def test_pdf_known_constant(self):
        got = tc.gaussian_pdf(0.0, tc.as_tensor(0.0), tc.as_tensor(1.0)).item()
        assert got == pytest.approx(0.39894228, abs=1e-8)

    def test_cdf_at_mean(self):
        assert tc.gaussian_cdf(1.3, tc.as_tensor(1.3), tc.as_tensor(0.7)).item() == 0.5

    def test_values_match_mpmath(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y, mu = rng.normal(size=2)
            sigma = rng.uniform(0.3, 2.0)
            for kind, fn in (("pdf", tc.gaussian_pdf), ("cdf", tc.gaussian_cdf),
                             ("surv", tc.log_survival)):
                got = fn(y, tc.as_tensor(mu), tc.as_tensor(sigma)).item()
                assert got == pytest.approx(gaussian_oracle(kind, y, mu, sigma), rel=1e-10)

    def test_log_survival_deep_tail_finite(self):
        # Oracle (mpmath, 40 digits): log(1 - CDF) at z = 8.
        got = tc.log_survival(8.0, tc.as_tensor(0.0), tc.as_tensor(1.0)).item()
        assert np.isfinite(got)
        assert got == pytest.approx(-35.0134371599145, abs=1e-9)
        far = tc.log_survival(40.0, tc.as_tensor(0.0), tc.as_tensor(1.0)).item()
        assert np.isfinite(far)

    def test_gradients(self):
        for kind in ("pdf", "cdf", "surv"):
            fn = {"pdf": tc.gaussian_pdf, "cdf": tc.gaussian_cdf, "surv": tc.log_survival}[kind]
            y = np.array([0.3, -0.5, 2.2])

            def op(mu, sigma):
                return fn(y, mu, tc.add(sigma, 1.2))

            check_op_gradient(op, [(3,), (3,)], seed=3, low=-0.8, high=0.8)

    def test_sigma_domain(self):
        with pytest.raises(ValidationError):
            tc.gaussian_pdf(0.0, tc.as_tensor(0.0), tc.as_tensor(-1.0))


class TestLstmGates:
    def test_matches_composed_primitives(self):
        # Dual route: the fused node against the same equations composed
        # from primitive ops.
        rng = np.random.default_rng(4)
        rows, hidden = 7, 5
        acts = rng.normal(size=(rows, 4 * hidden))
        c_prev = rng.normal(size=(rows, hidden))

        t_acts = tc.parameter(acts.copy())
        t_c = tc.parameter(c_prev.copy())
        h_fused, c_fused = tc.lstm_gates(t_acts, t_c)

        def composed(acts_t, c_t):
            gi = tc.sigmoid(acts_t[:, 0:hidden])
            gf = tc.sigmoid(acts_t[:, hidden:2 * hidden])
            go = tc.sigmoid(acts_t[:, 2 * hidden:3 * hidden])
            cand = tc.tanh(acts_t[:, 3 * hidden:])
            c_new = tc.add(tc.mul(gf, c_t), tc.mul(gi, cand))
            return tc.mul(go, tc.tanh(c_new)), c_new

        a2 = tc.parameter(acts.copy())
        c2 = tc.parameter(c_prev.copy())
        h_ref, c_ref = composed(a2, c2)
        assert h_fused.data == pytest.approx(h_ref.data, abs=1e-12)
        assert c_fused.data == pytest.approx(c_ref.data, abs=1e-12)

        loss = tc.sum_(tc.add(tc.square(h_fused), tc.mul(c_fused, 0.3)))
        tc.backward(loss)
        loss_ref = tc.sum_(tc.add(tc.square(h_ref), tc.mul(c_ref, 0.3)))
        tc.backward(loss_ref)
        assert t_acts.grad == pytest.approx(a2.grad, abs=1e-12)
        assert t_c.grad == pytest.approx(c2.grad, abs=1e-12)

    def test_fd_gradient(self):
        def op(acts, c_prev):
            h, c = tc.lstm_gates(acts, c_prev)
            return tc.add(tc.square(h), c)

        check_op_gradient(op, [(4, 12), (4, 3)], seed=9)

    def test_hidden_only_use_is_valid(self):
        # The final cell state is commonly discarded; its missing gradient
        # must count as zero.
        acts = tc.parameter(np.random.default_rng(1).normal(size=(3, 8)))
        c_prev = tc.as_tensor(np.zeros((3, 2)))
        h, _c = tc.lstm_gates(acts, c_prev)
        tc.backward(tc.sum_(h))
        assert acts.grad is not None


class TestBackward:
    def test_sum_of_squares(self):
        x = tc.parameter(np.array([1.0, 2.0]))
        tc.backward(tc.sum_(tc.square(x)))
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_constant_loss_leaves_grads_none(self):
        x = tc.parameter(np.array([1.0, 2.0]))
        tc.backward(tc.as_tensor(5.0))
        assert x.grad is None  # unused leaf: gradient is zero

    def test_reused_node_accumulates(self):
        x = tc.parameter(np.array([3.0]))
        y = tc.mul(x, x)  # x used twice
        tc.backward(tc.sum_(y))
        assert x.grad == pytest.approx([6.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValidationError):
            tc.backward(tc.as_tensor(np.zeros(3)))

    def test_three_layer_composite_fd(self):
        rng = np.random.default_rng(11)
        w1 = rng.normal(size=(4, 5))
        w2 = rng.normal(size=(5, 3))
        x = rng.normal(size=(2, 4))

        def net(w1_t, w2_t):
            hidden = tc.tanh(tc.matmul(tc.as_tensor(x), w1_t))
            out = tc.sigmoid(tc.matmul(hidden, w2_t))
            return tc.mean(tc.square(out))

        t1, t2 = tc.parameter(w1.copy()), tc.parameter(w2.copy())
        tc.backward(net(t1, t2))
        for t, arr, which in ((t1, w1, 0), (t2, w2, 1)):
            def f(v):
                args = [tc.as_tensor(w1), tc.as_tensor(w2)]
                args[which] = tc.as_tensor(v)
                return net(*args).item()

            numeric = finite_diff_grad(f, arr.copy())
            rel, n, _ = grad_errors(t.grad, numeric)
            assert n > 0 and rel.max() < 1e-4

    def test_forward_determinism(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 5))
        a = tc.tanh(tc.matmul(tc.as_tensor(x), tc.as_tensor(x)))
        b = tc.tanh(tc.matmul(tc.as_tensor(x), tc.as_tensor(x)))
        assert np.array_equal(a.data, b.data)

    def test_each_op_backward_runs_exactly_once(self):
        # Diamond-shaped reuse: the tape must be replayed in reverse
        # topological order with one visit per op.
        x = tc.parameter(np.array([1.5]))
        shared = tc.square(x)
        left = tc.mul(shared, 2.0)
        right = tc.mul(shared, 3.0)
        loss = tc.sum_(tc.add(left, right))
        counts = {}
        stack = [loss.op]
        seen = set()
        while stack:
            op = stack.pop()
            if id(op) in seen or op is None:
                continue
            seen.add(id(op))
            orig = op.backward_fn

            def wrapped(gs, op=op, orig=orig):
                counts[id(op)] = counts.get(id(op), 0) + 1
                return orig(gs)

            op.backward_fn = wrapped
            for p in op.parents:
                if p.op is not None:
                    stack.append(p.op)
        tc.backward(loss)
        assert all(c == 1 for c in counts.values())
        assert len(counts) == len(seen)
        # d/dx of (2x^2 + 3x^2) = 10x
        assert x.grad == pytest.approx([15.0])


class TestUnstackRows:
    def test_roundtrip_and_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 2, 3))  # batch 2, 3 steps
        t = tc.parameter(x.copy())
        parts = tc.unstack_rows(t, 3)
        assert np.array_equal(parts[1].data, x[1::3])
        loss = tc.sum_(tc.square(parts[0])) + tc.mul(tc.sum_(parts[2]), 2.0)
        tc.backward(loss)

        def f(v):
            want = np.sum(v[0::3] ** 2) + 2.0 * np.sum(v[2::3])
            return float(want)

        numeric = finite_diff_grad(f, x.copy())
        rel, n, _ = grad_errors(t.grad, numeric)
        assert n > 0 and rel.max() < 1e-4

    def test_indivisible_rejected(self):
        with pytest.raises(ValidationError):
            tc.unstack_rows(tc.as_tensor(np.zeros((5, 2))), 3)


class TestDebugChecks:
    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_nan_detected_in_debug_mode(self):
        with pytest.raises(NumericalError, match="log"):
            tc.log(tc.as_tensor(np.array([-1.0])))


class TestBufferPool:
    def test_values_survive_recycling_pattern(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(64, 8))
        with tc.buffer_pool():
            first = None
            for _ in range(4):
                tc.pool_recycle()
                t = tc.parameter(x.copy())
                loss = tc.mean(tc.square(tc.tanh(tc.matmul(t, tc.as_tensor(x.T)))))
                tc.backward(loss)
                if first is None:
                    first = (loss.item(), t.grad.copy())
                else:
                    assert loss.item() == first[0]
                    assert np.array_equal(t.grad, first[1])

    def test_pool_disabled_outside_context(self):
        assert not tc._POOL.enabled
        with tc.buffer_pool():
            assert tc._POOL.enabled
        assert not tc._POOL.enabled
