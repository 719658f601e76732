import math

import numpy as np
import pytest

import autodiff as ad
from errors import GraphError, NumericError, ShapeError


def _weighted_sum(t, weights):
    return ad.reduce_sum(ad.mul(t, ad.Tensor(weights)))


class TestTensor:
    def test_identity_from_flat_data(self):
        t = ad.tensor([2, 2], [1, 0, 0, 1])
        assert t.shape == (2, 2)
        assert np.array_equal(t.value, np.eye(2))
        assert t.is_constant

    def test_zero_vector(self):
        t = ad.tensor([3], [0, 0, 0])
        assert t.data == (0.0, 0.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ad.tensor([2], [1, 2, 3])

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            ad.tensor([2], [1.0, float("nan")])


class TestPrimitives:
    def test_matmul_identity(self):
        out = ad.primitive("matmul", ad.tensor([2, 2], [1, 0, 0, 1]), ad.tensor([2, 1], [3, 4]))
        assert out.data == (3.0, 4.0)

    def test_softmax_closed_form(self):
        out = ad.primitive("softmax_lastaxis", ad.tensor([2], [0.0, math.log(2.0)]))
        assert out.value == pytest.approx([1 / 3, 2 / 3], abs=1e-15)

    def test_concat(self):
        out = ad.primitive("concat_lastaxis", ad.tensor([2], [1, 2]), ad.tensor([1], [3]))
        assert out.data == (1.0, 2.0, 3.0)

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError):
            ad.add(ad.tensor([2, 2], [1, 2, 3, 4]), ad.tensor([2], [1, 2]))
        with pytest.raises(ShapeError):
            ad.matmul(ad.tensor([2, 3], [0] * 6), ad.tensor([2, 1], [0, 0]))

    def test_nan_is_not_masked(self):
        x = ad.Tensor(np.array([np.nan, -1.0, 2.0]))
        out = ad.relu(x)
        assert np.isnan(out.value[0])
        assert out.data[1:] == (0.0, 2.0)
        zeros = ad.Tensor(np.zeros(3))
        for op in (ad.maximum, ad.minimum):
            assert np.isnan(op(x, zeros).value[0]) and np.isnan(op(zeros, x).value[0])

    def test_exp_rejects_nan(self):
        with pytest.raises(NumericError):
            ad.exp(ad.Tensor(np.array([np.nan])))

    def test_unknown_primitive(self):
        with pytest.raises(GraphError):
            ad.primitive("conv3d", ad.tensor([1], [1]))

    def test_constants_record_nothing(self):
        g = ad.Graph()
        x = g.leaf(np.array([1.0, 2.0]))
        ad.add(ad.tensor([2], [1, 1]), ad.tensor([2], [2, 2]))
        assert len(g.nodes) == 1
        ad.add(x, ad.tensor([2], [2, 2]))
        assert len(g.nodes) == 2


class TestBackward:
    def test_square(self):
        g = ad.Graph()
        x = g.leaf(np.array([3.0]))
        g.backward(ad.mul(x, x))
        assert g.grad(x)[0] == 6.0

    def test_non_scalar_loss(self):
        g = ad.Graph()
        x = g.leaf(np.array([1.0, 2.0]))
        with pytest.raises(GraphError):
            g.backward(ad.scale(x, 2.0))

    def test_leaf_shares_storage(self):
        arr = np.array([1.0, 2.0])
        g = ad.Graph()
        assert g.leaf(arr).value is arr

    def test_accumulation_order_does_not_matter(self, rng):
        a0, b0 = rng.normal(size=(2, 3))

        def run(product_first):
            g = ad.Graph()
            a, b = g.leaf(a0.copy()), g.leaf(b0.copy())
            if product_first:
                product = ad.reduce_sum(ad.mul(a, b))
                growth = ad.reduce_sum(ad.exp(a))
                loss = ad.add(product, growth)
            else:
                growth = ad.reduce_sum(ad.exp(a))
                product = ad.reduce_sum(ad.mul(a, b))
                loss = ad.add(growth, product)
            g.backward(loss)
            return g.grad(a).copy(), g.grad(b).copy()

        (ga1, gb1), (ga2, gb2) = run(True), run(False)
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)
        assert np.allclose(ga1, b0 + np.exp(a0), rtol=0, atol=1e-12)

    def test_replay_is_bit_identical(self, rng):
        w = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 1))

        def run():
            g = ad.Graph()
            W, V = g.leaf(w), g.leaf(v)
            hidden = ad.reshape(ad.relu(ad.matmul(W, V)), (1, 3))
            loss = ad.reduce_sum(ad.mul(ad.softmax_lastaxis(hidden), ad.tensor([1, 3], [1.0, 2.0, 3.0])))
            g.backward(loss)
            return loss.item(), g.grad(W).copy(), g.grad(V).copy()

        a, b = run(), run()
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


class TestStopGradient:
    def test_forward_identity(self):
        g = ad.Graph()
        x = g.leaf(np.array([5.0]))
        assert ad.stop_gradient(x).data == (5.0,)

    def test_only_unstopped_factor_contributes(self):
        g = ad.Graph()
        x = g.leaf(np.array([3.0]))
        g.backward(ad.mul(ad.stop_gradient(x), x))
        assert g.grad(x)[0] == 3.0

    def test_fully_blocked(self):
        g = ad.Graph()
        x = g.leaf(np.array([3.0]))
        g.backward(ad.reduce_sum(ad.stop_gradient(ad.mul(x, x))))
        assert g.grad(x)[0] == 0.0

    def test_forward_values_unchanged(self, rng):
        a = rng.normal(size=(2, 3))

        def composite(wrap):
            g = ad.Graph()
            x = g.leaf(a)
            h = ad.relu(x)
            if wrap:
                h = ad.stop_gradient(h)
            return ad.reduce_sum(ad.exp(h)).item()

        assert composite(True) == composite(False)


class TestCheckGradients:
    def test_quadratic(self, rng):
        x = rng.normal(size=(4,))
        err = ad.check_gradients(lambda g, p: ad.reduce_sum(ad.mul(p[0], p[0])), [x])
        assert err < 1e-6

    def test_mean_of_matmul(self, rng):
        w = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 1))
        err = ad.check_gradients(lambda g, p: ad.reduce_mean(ad.matmul(p[0], p[1])), [w, v])
        assert err < 1e-4

    def test_constant_in_parameter(self, rng):
        x = rng.normal(size=(3,))
        unused = rng.normal(size=(2,))
        err = ad.check_gradients(lambda g, p: ad.reduce_sum(ad.mul(p[0], p[0])), [x, unused])
        assert err < 1e-6

    def test_restores_parameters(self, rng):
        x = rng.normal(size=(5,))
        before = x.copy()
        ad.check_gradients(lambda g, p: ad.reduce_sum(ad.exp(p[0])), [x])
        assert np.array_equal(x, before)

    def test_non_deterministic_loss(self):
        calls = []

        def build(g, p):
            calls.append(1)
            return ad.reduce_sum(ad.scale(p[0], float(len(calls))))

        with pytest.raises(GraphError):
            ad.check_gradients(build, [np.ones(2)])

    def test_eps_range(self):
        with pytest.raises(ValueError):
            ad.check_gradients(lambda g, p: ad.reduce_sum(p[0]), [np.ones(1)], eps=0.1)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


@pytest.mark.parametrize("trial", range(10))
class TestPrimitiveGradients:
    """Each primitive against central differences on random small instances."""

    def test_binary_elementwise(self, trial):
        rng = np.random.default_rng(trial)
        a = rng.normal(size=(2, 3))
        b = _away_from_zero(rng, (2, 3))
        w = rng.normal(size=(2, 3))
        for op in (ad.add, ad.sub, ad.mul, ad.div):
            assert ad.check_gradients(lambda g, p: _weighted_sum(op(p[0], p[1]), w), [a, b]) < 1e-4

    def test_maximum_minimum(self, trial):
        rng = np.random.default_rng(100 + trial)
        a = rng.normal(size=(3,))
        b = a + _away_from_zero(rng, (3,))
        w = rng.normal(size=(3,))
        for op in (ad.maximum, ad.minimum):
            assert ad.check_gradients(lambda g, p: _weighted_sum(op(p[0], p[1]), w), [a, b]) < 1e-4

    def test_unary(self, trial):
        rng = np.random.default_rng(200 + trial)
        x = _away_from_zero(rng, (2, 4))
        w = rng.normal(size=(2, 4))
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.relu(p[0]), w), [x]) < 1e-4
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.exp(p[0]), w), [x]) < 1e-4
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.log(p[0]), w), [np.abs(x)]) < 1e-4
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.scale(p[0], 2.5), w), [x]) < 1e-4

    def test_softmax_family(self, trial):
        rng = np.random.default_rng(300 + trial)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.softmax_lastaxis(p[0]), w), [x]) < 1e-4
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.log_softmax_lastaxis(p[0]), w), [x]) < 1e-4

    def test_layout_and_reductions(self, trial):
        rng = np.random.default_rng(400 + trial)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        m = rng.normal(size=(3, 2))
        w5 = rng.normal(size=(2, 5))
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.concat_lastaxis(p[0], p[1]), w5), [a, b]) < 1e-4
        assert ad.check_gradients(lambda g, p: _weighted_sum(ad.matmul(p[0], p[1]), b), [a, m]) < 1e-4
        assert ad.check_gradients(
            lambda g, p: _weighted_sum(ad.slice_lastaxis(p[0], 1, 3), b), [a]) < 1e-4
        assert ad.check_gradients(
            lambda g, p: _weighted_sum(ad.reshape(p[0], (3, 2)), m), [a]) < 1e-4
        assert ad.check_gradients(lambda g, p: ad.reduce_mean(ad.mul(p[0], p[0])), [a]) < 1e-4
