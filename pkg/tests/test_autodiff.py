import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pivotmt import autodiff as ad
from pivotmt.autodiff import Tensor


def leaf(a, name=None):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True, name=name)


class TestForwardValues:
    def test_matmul_direct_substitution(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_identity_matmul(self, rng):
        A = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_cross_entropy_uniform_is_log_v(self):
        V = 7
        assert float(ad.cross_entropy(Tensor(np.zeros(V)), 3).data) == pytest.approx(math.log(V))

    def test_cross_entropy_confident_target(self):
        logits = np.full(5, -50.0)
        logits[2] = 50.0
        assert float(ad.cross_entropy(Tensor(logits), 2).data) == pytest.approx(0.0, abs=1e-12)

    def test_layer_norm_constant_input(self):
        d = 6
        out = ad.layer_norm(Tensor(np.full((2, d), 3.3)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-10, 10)), arrays(np.float64, (5,), elements=st.floats(-3, 3)))
    def test_layer_norm_mean_equals_bias_mean(self, x, bias):
        # with unit gain the output rows have mean equal to mean(bias)
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(bias)).data
        np.testing.assert_allclose(out.mean(axis=-1), bias.mean(), atol=1e-9)


class TestGradients:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        ad.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_unused_parameter_zero_gradient(self, rng):
        x, unused = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
        ad.backward((x * x).sum())
        assert unused.grad is None
        errs = ad.gradcheck(lambda: (x * x).sum(), [x, unused])
        assert max(errs.values()) < 1e-8

    def test_matmul_finite_differences(self, rng):
        a, b = leaf(rng.normal(size=(4, 5)), "a"), leaf(rng.normal(size=(5, 3)), "b")
        errs = ad.gradcheck(lambda: ad.matmul(a, b).sum(), [a, b])
        assert max(errs.values()) < 1e-6

    def test_softmax_finite_differences(self, rng):
        x = leaf(rng.normal(size=6))
        w = rng.normal(size=6)
        errs = ad.gradcheck(lambda: (ad.softmax(x) * Tensor(w)).sum(), [x])
        assert errs["0"] < 1e-6

    def test_cross_entropy_value_and_gradient(self, rng):
        z = rng.normal(size=10)
        x = leaf(z)
        expected = -(z[4] - np.log(np.exp(z).sum()))
        assert float(ad.cross_entropy(x, 4).data) == pytest.approx(expected, rel=1e-12)
        assert ad.gradcheck(lambda: ad.cross_entropy(x, 4), [x])["0"] < 1e-6

    def test_layer_norm_finite_differences(self, rng):
        x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
        w = Tensor(rng.normal(size=(3, 5)))
        errs = ad.gradcheck(lambda: (ad.layer_norm(x, g, b) * w).sum(), [x, g, b])
        assert max(errs.values()) < 1e-5

    def test_composite_elementwise(self, rng):
        x, y = leaf(rng.normal(size=(2, 3))), leaf(rng.uniform(0.5, 2.0, size=(3,)))

        def f():
            return (ad.tanh(x * y) + ad.log(y) - ad.exp(x) / y).sum()

        f_val = f()
        ad.backward(f_val)
        for t in (x, y):
            num = ad.numerical_gradient(f, t, 1e-6)
            np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("op", ["gelu", "relu", "sqrt", "power"])
    def test_unary_ops(self, rng, op):
        x = leaf(rng.uniform(0.3, 2.0, size=(4,)))
        fn = {"gelu": ad.gelu, "relu": ad.relu, "sqrt": ad.sqrt, "power": lambda t: ad.power(t, 1.7)}[op]
        w = Tensor(rng.normal(size=4))
        assert ad.gradcheck(lambda: (fn(x) * w).sum(), [x])["0"] < 1e-6

    def test_broadcasting_reductions(self, rng):
        a, b = leaf(rng.normal(size=(2, 1, 3))), leaf(rng.normal(size=(4, 1)))
        errs = ad.gradcheck(lambda: ad.mean(ad.max_(a * b + a, axis=1) ** 2), [a, b])
        assert max(errs.values()) < 1e-6

    def test_indexing_embedding_concat(self, rng):
        table = leaf(rng.normal(size=(6, 3)))
        ids = np.array([[1, 1, 4], [0, 5, 1]])

        def f():
            e = ad.embedding(table, ids)
            both = ad.concat([e, ad.getitem(e, (slice(None), slice(0, 2)))], axis=1)
            return ad.l2_normalize(ad.stack([both, both * 2.0], axis=0)).sum() + (e[0, 1] ** 2).sum()

        assert ad.gradcheck(f, [table])["0"] < 1e-6

    def test_masked_fill_blocks_gradient(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        mask = np.array([[True, False, False], [False, False, True]])
        ad.backward(ad.softmax(ad.masked_fill(x, mask, -np.inf)).sum() * 0 + ad.masked_fill(x, mask, 0.0).sum())
        np.testing.assert_array_equal(x.grad, (~mask).astype(float))


class TestTape:
    def test_shared_subexpression_visited_once(self):
        x = leaf(2.0)
        y = x * x            # used twice below
        z = y + y * 3.0      # dz/dx = 4 * 2x = 16
        ad.backward(z)
        assert float(x.grad) == pytest.approx(16.0)

    def test_gradients_accumulate_across_calls(self):
        x = leaf(1.5)
        ad.backward(x * 2.0)
        ad.backward(x * 2.0)
        assert float(x.grad) == pytest.approx(4.0)

    def test_no_grad_builds_no_tape(self):
        x = leaf(np.ones(3))
        with ad.no_grad():
            y = (x * 3).sum()
        assert not y.requires_grad and y._parents == ()
        assert ad.backward(y) == {}

    def test_detach_cuts_path(self):
        x = leaf(np.ones(3))
        ad.backward((x.detach() * x).sum())
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_nonscalar_backward_rejected(self):
        with pytest.raises(ad.UsageError):
            ad.backward(leaf(np.ones(3)) * 2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_forward_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor(np.array([-1.0])))

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradcheck_requires_float64(self):
        with pytest.raises(ad.UsageError):
            ad.gradcheck(lambda: Tensor(np.ones(1, np.float32)), [Tensor(np.ones(1, np.float32), requires_grad=True)])

    @given(st.integers(1, 4), st.integers(1, 4))
    def test_unbroadcast_inverts_broadcast(self, m, n):
        g = np.ones((3, m, n))
        assert ad.unbroadcast(g, (m, 1)).tolist() == np.full((m, 1), 3.0 * n).tolist()
