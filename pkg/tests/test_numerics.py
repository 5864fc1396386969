"""Kernel-level oracles: softmax, normalization, swiglu, rope, NLL, and the
gradient checker itself."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bamforge import tensor as tt
from bamforge.errors import ConfigError, NumericError, ShapeError
from bamforge.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSoftmax:
    def test_symmetry(self):
        out = tt.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_analytic_quarters(self):
        out = tt.softmax(Tensor([math.log(1.0), math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-14)

    def test_large_logits_no_overflow(self):
        # hand oracle on max-shifted logits [0, 0, -1]
        out = tt.softmax(Tensor([1000.0, 1000.0, 999.0]))
        assert np.isfinite(out.data).all()
        e = np.array([1.0, 1.0, math.exp(-1.0)])
        np.testing.assert_allclose(out.data, e / e.sum(), rtol=1e-14)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            tt.softmax(Tensor([0.0, np.inf]))
        with pytest.raises(NumericError):
            tt.softmax(Tensor([np.nan, 0.0]))

    @given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=1, max_size=40))
    @settings(max_examples=200, deadline=None)
    def test_sums_to_one(self, vals):
        out = tt.softmax(Tensor(vals))
        assert abs(out.data.sum() - 1.0) < 1e-12
        assert (out.data >= 0).all()

    def test_gradient(self):
        x = Tensor(rng(1).standard_normal(7), requires_grad=True)
        w = rng(2).standard_normal(7)  # fixed projection to a scalar
        err = tt.grad_check(lambda t: (tt.softmax(t) * Tensor(w)).sum(), [x])
        assert err < 1e-8


class TestScaleNorm:
    def test_unit_vector(self):
        out = tt.rms_norm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor([1.0] * 4))
        np.testing.assert_allclose(out.data, np.ones(4), atol=1e-5)

    def test_rms_two(self):
        out = tt.rms_norm(Tensor([2.0, 2.0]), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.data, [1.0, 1.0], atol=1e-6)

    def test_matches_scalar_loop(self):
        x = rng(3).standard_normal((5, 16))
        g = rng(4).standard_normal(16)
        out = tt.rms_norm(Tensor(x), Tensor(g))
        expect = np.empty_like(x)
        for i in range(x.shape[0]):
            ms = sum(float(v) ** 2 for v in x[i]) / x.shape[1] + tt.NORM_EPS
            for j in range(x.shape[1]):
                expect[i, j] = x[i, j] / math.sqrt(ms) * g[j]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_zero_vector_guarded(self):
        out = tt.rms_norm(Tensor(np.zeros(8)), Tensor(np.ones(8)))
        assert np.isfinite(out.data).all()

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            tt.rms_norm(Tensor(np.ones(4)), Tensor(np.ones(5)))

    def test_gradient(self):
        x = Tensor(rng(5).standard_normal((3, 6)), requires_grad=True)
        g = Tensor(rng(6).standard_normal(6), requires_grad=True)
        err = tt.grad_check(lambda a, b: tt.rms_norm(a, b).sum(), [x, g])
        assert err < 1e-4


class TestSwiglu:
    def test_zero_gate(self):
        out = tt.swiglu(Tensor([0.0]), Tensor([5.0]))
        np.testing.assert_allclose(out.data, [0.0], atol=1e-15)

    def test_silu_at_one(self):
        out = tt.swiglu(Tensor([1.0]), Tensor([1.0]))
        np.testing.assert_allclose(out.data, [1.0 / (1.0 + math.exp(-1.0))], rtol=1e-12)
        assert abs(out.data[0] - 0.7310585786300049) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            tt.swiglu(Tensor([1.0, 2.0]), Tensor([1.0]))

    def test_gradient_vs_finite_difference(self):
        g = Tensor(rng(7).standard_normal(9), requires_grad=True)
        u = Tensor(rng(8).standard_normal(9), requires_grad=True)
        err = tt.grad_check(lambda a, b: tt.swiglu(a, b).sum(), [g, u])
        assert err < 1e-6


class TestRope:
    def test_position_zero_identity(self):
        x = rng(9).standard_normal((1, 4))
        out = tt.rope_rotate(Tensor(x), positions=[0])
        np.testing.assert_array_equal(out.data, x)

    def test_two_dim_rotation(self):
        out = tt.rope_rotate(Tensor([[1.0, 0.0], [1.0, 0.0]]))
        np.testing.assert_allclose(out.data[1], [math.cos(1.0), math.sin(1.0)], rtol=1e-14)

    @given(st.integers(min_value=1, max_value=20))
    @settings(max_examples=40, deadline=None)
    def test_norm_preserving(self, t_len):
        x = np.random.default_rng(t_len).standard_normal((t_len, 8))
        out = tt.rope_rotate(Tensor(x))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1),
                                   np.linalg.norm(x, axis=-1), atol=1e-10)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigError):
            tt.rope_rotate(Tensor(np.ones((2, 3))))

    def test_gradient(self):
        x = Tensor(rng(10).standard_normal((3, 4)), requires_grad=True)
        w = rng(11).standard_normal((3, 4))
        err = tt.grad_check(lambda t: (tt.rope_rotate(t) * Tensor(w)).sum(), [x])
        assert err < 1e-8


class TestCrossEntropy:
    def test_uniform_logits(self):
        for v in (3, 7, 256):
            loss = tt.cross_entropy_nll(Tensor(np.zeros(v)), 0)
            assert abs(loss.item() - math.log(v)) < 1e-12

    def test_dominant_logit(self):
        logits = np.zeros(11)
        logits[4] = 30.0
        loss = tt.cross_entropy_nll(Tensor(logits), 4)
        assert loss.item() < 1e-9

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            tt.cross_entropy_nll(Tensor(np.zeros(5)), 5)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(rng(12).standard_normal(6), requires_grad=True)
        loss = tt.cross_entropy_nll(logits, 2)
        loss.backward()
        probs = np.exp(logits.data) / np.exp(logits.data).sum()
        expect = probs.copy()
        expect[2] -= 1.0
        np.testing.assert_allclose(logits.grad, expect, atol=1e-12)

    def test_gradient_vs_finite_difference(self):
        logits = Tensor(rng(13).standard_normal((4, 9)), requires_grad=True)
        targets = rng(14).integers(0, 9, size=4)
        err = tt.grad_check(lambda t: tt.cross_entropy_nll(t, targets), [logits])
        assert err < 1e-6


class TestGradCheck:
    def test_square_at_three(self):
        x = Tensor([3.0], requires_grad=True)
        err = tt.grad_check(lambda t: (t * t).sum(), [x])
        assert err < 1e-8
        np.testing.assert_allclose(x.grad, [6.0], rtol=1e-12)

    def test_causal_attention_gradient(self):
        r = rng(15)
        q = Tensor(r.standard_normal((1, 2, 5, 4)), requires_grad=True)
        k = Tensor(r.standard_normal((1, 2, 5, 4)), requires_grad=True)
        v = Tensor(r.standard_normal((1, 2, 5, 4)), requires_grad=True)
        w = r.standard_normal((1, 2, 5, 4))
        err = tt.grad_check(lambda a, b, c: (tt.causal_attention(a, b, c) * Tensor(w)).sum(),
                            [q, k, v])
        assert err < 1e-4


class TestTapeBasics:
    def test_matmul_identity(self):
        a = rng(16).standard_normal((6, 6))
        out = Tensor(a) @ Tensor(np.eye(6))
        np.testing.assert_allclose(out.data, a, atol=1e-12)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_backward_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_deterministic_accumulation(self):
        def run():
            x = Tensor(np.arange(12, dtype=float).reshape(3, 4) / 7.0, requires_grad=True)
            y = tt.softmax(x @ Tensor(np.arange(16, dtype=float).reshape(4, 4) / 5.0))
            loss = (y * y).sum() + tt.rms_norm(x, Tensor(np.ones(4))).mean()
            loss.backward()
            return x.grad.copy()

        g1, g2 = run(), run()
        np.testing.assert_array_equal(g1, g2)

    def test_broadcast_add_gradient(self):
        a = Tensor(rng(17).standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng(18).standard_normal(4), requires_grad=True)
        err = tt.grad_check(lambda x, y: ((x + y) * (x + y)).sum(), [a, b])
        assert err < 1e-8

    def test_no_grad_blocks_taping(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with tt.no_grad():
            y = (x * 2.0).sum()
        assert y._vjp is None and not y.requires_grad

    def test_logsumexp(self):
        x = Tensor(np.array([[1.0, 1.0]]), requires_grad=True)
        out = tt.logsumexp(x)
        np.testing.assert_allclose(out.data, [1.0 + math.log(2.0)], rtol=1e-14)
        err = tt.grad_check(lambda t: tt.logsumexp(t).sum(), [x])
        assert err < 1e-8

    def test_float32_mode(self):
        tt.set_default_dtype(np.float32)
        try:
            x = Tensor([1.0, 2.0])
            assert x.data.dtype == np.float32
            out = tt.softmax(x)
            assert out.data.dtype == np.float32
        finally:
            tt.set_default_dtype(np.float64)
