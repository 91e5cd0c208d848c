import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrmoe import numerics as nx
from lrmoe.numerics import ShapeError, Tensor


def t64(a, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        eye = nx.tensor(np.eye(2))
        np.testing.assert_array_equal(nx.matmul(eye, eye).data, np.eye(2))

    def test_hand_sum(self):
        out = nx.matmul(nx.tensor([[1, 2], [3, 4]]), nx.tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = nx.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(nx.tensor(np.zeros((2, 3))), nx.tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(nx.softmax(nx.tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        out = nx.softmax(nx.tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_direct_evaluation(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(expected, [0.0900, 0.2447, 0.6652], atol=1e-4)
        np.testing.assert_allclose(nx.softmax(nx.tensor(x)).data, expected, atol=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        out = nx.softmax(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = nx.layer_norm(nx.tensor([1.0, 1.0, 1.0]), nx.tensor(np.ones(3)), nx.tensor(np.zeros(3)), 1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized(self):
        out = nx.layer_norm(
            Tensor(np.array([-1.0, 1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12
        )
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_moments(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(1, 64))
        out = nx.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64)), 1e-5).data
        assert abs(out.mean()) <= 1e-6
        assert abs(out.var() - 1.0) <= 1e-3


class TestBackward:
    def test_square(self):
        x = t64(3.0)
        nx.backward(nx.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_constant_loss(self):
        x = t64([1.0, 2.0])
        loss = nx.sum_all(nx.mul(x, 0.0))
        nx.backward(loss)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_non_scalar_seed_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            nx.backward(t64([1.0, 2.0]))

    def test_unreachable_untouched(self):
        x, y = t64(2.0), t64(5.0)
        nx.backward(nx.mul(x, 3.0))
        assert y.grad is None

    def test_accumulates_across_calls(self):
        x = t64(2.0)
        nx.backward(nx.mul(x, 3.0))
        nx.backward(nx.mul(x, 3.0))
        assert x.grad == pytest.approx(6.0)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        grads = []
        for _ in range(2):
            ta, tb = t64(a), t64(b)
            nx.backward(nx.sum_all(nx.softmax(nx.matmul(ta, tb))))
            grads.append((ta.grad.copy(), tb.grad.copy()))
        assert np.array_equal(grads[0][0], grads[1][0]) and np.array_equal(grads[0][1], grads[1][1])


# every differentiable op, float64, inputs in [-1, 1]
def _u(rng, *shape):
    return t64(rng.uniform(-1, 1, size=shape))


def _weighted(out, rng):
    """Scalarize with fixed random weights so each output entry matters."""
    w = rng.uniform(-1, 1, size=out.shape)
    return nx.sum_all(nx.mul_const(out, w))


OPS = {
    "add": lambda r: ([a := _u(r, 3, 4), b := _u(r, 3, 4)], lambda: nx.add(a, b)),
    "sub": lambda r: ([a := _u(r, 3, 4), b := _u(r, 3, 4)], lambda: nx.sub(a, b)),
    "mul": lambda r: ([a := _u(r, 3, 4), b := _u(r, 3, 4)], lambda: nx.mul(a, b)),
    "scalar_mul": lambda r: ([a := _u(r, 5)], lambda: nx.mul(a, 1.7)),
    "add_bias": lambda r: ([a := _u(r, 2, 3, 4), b := _u(r, 4)], lambda: nx.add_bias(a, b)),
    "scale_rows": lambda r: ([a := _u(r, 4, 3), s := _u(r, 4)], lambda: nx.scale_rows(a, s)),
    "relu": lambda r: ([a := _u(r, 4, 5)], lambda: nx.relu(a)),
    "exp": lambda r: ([a := _u(r, 4)], lambda: nx.exp(a)),
    "log": lambda r: ([a := t64(r.uniform(0.5, 2.0, size=4))], lambda: nx.log(a)),
    "matmul_2d": lambda r: ([a := _u(r, 3, 4), b := _u(r, 4, 2)], lambda: nx.matmul(a, b)),
    "matmul_weight": lambda r: ([a := _u(r, 2, 3, 4), b := _u(r, 4, 2)], lambda: nx.matmul(a, b)),
    "matmul_batched": lambda r: ([a := _u(r, 2, 3, 4), b := _u(r, 2, 4, 2)], lambda: nx.matmul(a, b)),
    "softmax": lambda r: ([a := _u(r, 3, 5)], lambda: nx.softmax(a)),
    "log_softmax": lambda r: ([a := _u(r, 3, 5)], lambda: nx.log_softmax(a)),
    "layer_norm": lambda r: ([a := _u(r, 3, 6), g := _u(r, 6), b := _u(r, 6)], lambda: nx.layer_norm(a, g, b, 1e-5)),
    "sum_axis": lambda r: ([a := _u(r, 2, 3, 4)], lambda: nx.sum_axis(a, 1)),
    "mean_rows": lambda r: ([a := _u(r, 5, 3)], lambda: nx.mean_rows(a)),
    "mean": lambda r: ([a := _u(r, 5, 3)], lambda: nx.mean(a)),
    "reshape": lambda r: ([a := _u(r, 2, 6)], lambda: nx.reshape(a, (3, 4))),
    "transpose": lambda r: ([a := _u(r, 2, 3, 4)], lambda: nx.transpose(a, (2, 0, 1))),
    "index": lambda r: ([a := _u(r, 3, 4)], lambda: nx.index(a, (slice(0, 2), 1))),
    "gather_rows": lambda r: ([a := _u(r, 5, 3)], lambda: nx.gather_rows(a, np.array([4, 0, 0, 2]))),
    "scatter_rows": lambda r: (
        [a := _u(r, 2, 3), b := _u(r, 1, 3)],
        lambda: nx.scatter_rows([(a, np.array([0, 3])), (b, np.array([1]))], 4),
    ),
    "pick": lambda r: ([a := _u(r, 4, 3)], lambda: nx.pick(a, np.array([2, 0, 1, 1]))),
    "stack_scalars": lambda r: ([a := _u(r, 1), b := _u(r, 1)], lambda: nx.stack_scalars([nx.sum_all(a), nx.sum_all(b)])),
    "conv2d": lambda r: (
        [x := _u(r, 2, 2, 7, 8), w := _u(r, 3, 2, 3, 3), b := _u(r, 3)],
        lambda: nx.conv2d(x, w, b, stride=2, pad=(1, 0)),
    ),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradcheck(op):
    rng = np.random.default_rng(abs(hash(op)) % 2**32)
    inputs, fn = OPS[op](rng)
    out_shape_probe = fn()
    w_rng = np.random.default_rng(7)
    weights = w_rng.uniform(-1, 1, size=out_shape_probe.shape)
    worst = nx.gradcheck(lambda: nx.sum_all(nx.mul_const(fn(), weights)), inputs, eps=1e-3, rtol=1e-3, atol=1e-6)
    assert worst <= 1e-3


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(1, 2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=(1, 0)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    ho, wo = (xp.shape[2] - 3) // 2 + 1, (xp.shape[3] - 3) // 2 + 1
    ref = np.zeros((1, 3, ho, wo))
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.add(nx.tensor(np.zeros(3)), nx.tensor(np.zeros(4)))


def test_no_grad_builds_no_graph():
    x = t64([1.0, 2.0])
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_float32_default():
    assert nx.tensor([1, 2]).dtype == np.float32
    assert nx.add(nx.tensor([1.0]), 1.0).dtype == np.float32


def test_flop_counter_counts_matmuls():
    with nx.count_flops() as c:
        nx.matmul(nx.tensor(np.ones((3, 4))), nx.tensor(np.ones((4, 5))))
    assert c[0] == 2 * 3 * 4 * 5
