import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrmoe import numerics as nx
from lrmoe.encoder import FFNParams, ffn_forward
from lrmoe.numerics import ShapeError, Tensor
from lrmoe.routing import (
    BalanceStats,
    GateParams,
    LidRouter,
    balance_loss,
    balance_loss_tensor,
    densify_alignment,
    lid_logits,
    mle_dispatch,
    smoe_dispatch,
    smoe_gate,
    utterance_pool,
    utterance_route,
)


def experts(K, d=2, d_ff=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(K):
        e = FFNParams.init(rng, d, d_ff)
        for t in (e.w1, e.b1, e.w2, e.b2):
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
        e.b1.data = rng.normal(size=e.b1.shape)
        out.append(e)
    return out


class TestLidLogits:
    def test_bias_only(self):
        r = LidRouter(Tensor(np.zeros((4, 3))), Tensor(np.array([1.0, 0, 0])))
        out = lid_logits(Tensor(np.random.default_rng(0).normal(size=(5, 4))), r)
        np.testing.assert_array_equal(out.data, np.tile([1.0, 0, 0], (5, 1)))

    def test_hand_matvec(self):
        w = np.array([[0.5, -1.0, 2.0], [3.0, 0.0, 1.0]])
        r = LidRouter(Tensor(w), Tensor(np.array([0.1, 0.2, 0.3])))
        out = lid_logits(Tensor(np.array([[1.0, 0.0]])), r)
        np.testing.assert_allclose(out.data, [[0.6, -0.8, 2.3]])

    @pytest.mark.parametrize("K", [2, 4, 8])
    def test_width(self, K):
        r = LidRouter.init(np.random.default_rng(0), 6, K)
        assert lid_logits(Tensor(np.zeros((3, 6), np.float32)), r).shape == (3, K + 1)
        assert r.num_languages == K

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            lid_logits(Tensor(np.zeros((3, 5))), LidRouter.init(np.random.default_rng(0), 6, 2))


class TestSmoeGate:
    def test_uniform_and_tie(self):
        g = GateParams(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
        p, top = smoe_gate(Tensor(np.ones((2, 3))), g)
        np.testing.assert_allclose(p.data, 0.25)
        assert top.tolist() == [0, 0]

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        g = GateParams.init(rng, 5, 3)
        p, _ = smoe_gate(Tensor(rng.normal(size=(10, 5)).astype(np.float32)), g)
        np.testing.assert_allclose(p.data.sum(1), 1.0, atol=1e-6)

    def test_direct_softmax(self):
        w = np.array([[1.0, -1.0], [0.5, 0.0]])
        g = GateParams(Tensor(w), Tensor(np.array([0.0, 0.2])))
        p, top = smoe_gate(Tensor(np.array([[2.0, 1.0]])), g)
        z = np.array([2.5, -1.8])
        np.testing.assert_allclose(p.data[0], np.exp(z) / np.exp(z).sum())
        assert top.tolist() == [0]


class TestBalanceLoss:
    @pytest.mark.parametrize("n", [2, 3, 8])
    def test_uniform(self, n):
        assert balance_loss(BalanceStats(np.full(n, 1 / n), np.full(n, 1 / n))) == pytest.approx(1.0)

    def test_collapse(self):
        assert balance_loss(BalanceStats([1, 0, 0, 0], [1, 0, 0, 0])) == pytest.approx(4.0)

    def test_hand_value(self):
        assert balance_loss(BalanceStats([1, 0], [0.9, 0.1])) == pytest.approx(1.8)

    def test_tensor_form_agrees(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(12, 4))
        probs = Tensor(np.exp(logits) / np.exp(logits).sum(1, keepdims=True), requires_grad=True)
        top = probs.data.argmax(1)
        loss, stats = balance_loss_tensor(probs, top)
        assert stats.f.sum() == pytest.approx(1.0) and stats.p_mean.sum() == pytest.approx(1.0)
        assert float(loss.data) == pytest.approx(balance_loss(stats))
        nx.backward(loss)
        # d/dp_ij of n * sum_i f_i * mean_j p_ji = n * f_i / rows
        np.testing.assert_allclose(probs.grad, np.tile(4 * stats.f / 12, (12, 1)))


class TestDensify:
    @pytest.mark.parametrize(
        "src,routes,degen",
        [
            ([0, 1, 0, 2, 0], [1, 1, 1, 2, 2], False),
            ([2, 0, 0], [2, 2, 2], False),
            ([0, 0, 0], [1, 1, 1], True),
            ([0, 0, 3, 1], [3, 3, 3, 1], False),
        ],
    )
    def test_examples(self, src, routes, degen):
        al = densify_alignment(src)
        assert al.routes == routes and al.degenerate == degen and al.source_greedy == src

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=40))
    def test_properties(self, src):
        al = densify_alignment(src)
        assert len(al.routes) == len(src)
        assert 0 not in al.routes
        assert all(r == s for r, s in zip(al.routes, src) if s != 0)
        assert densify_alignment(al.routes).routes == al.routes


class TestPooling:
    def test_constant_rows(self):
        row = np.array([0.3, -1.0, 2.0])
        np.testing.assert_allclose(utterance_pool(Tensor(np.tile(row, (6, 1)))).data, row)

    def test_two_rows(self):
        r_u = utterance_pool(Tensor(np.array([[1.0, 0, 0], [0, 0, 2]]))).data
        np.testing.assert_allclose(r_u, [0.5, 0, 1])
        assert utterance_route(r_u) == 2

    def test_blank_excluded(self):
        assert utterance_route(np.array([9.0, 0.1, 0.2])) == 2

    def test_tie_goes_low(self):
        assert utterance_route(np.array([0.0, 1.0, 1.0])) == 1

    def test_random_mean(self):
        r = np.random.default_rng(3).normal(size=(9, 5))
        np.testing.assert_allclose(utterance_pool(Tensor(r)).data, r.mean(0), atol=1e-6)

    def test_shift_invariance_of_argmax(self):
        rng = np.random.default_rng(4)
        r = rng.normal(size=(20, 4))
        shifted = r + rng.normal(size=(20, 1)) * 5
        assert (r.argmax(1) == shifted.argmax(1)).all()
        assert densify_alignment(r.argmax(1)).routes == densify_alignment(shifted.argmax(1)).routes


class TestMleDispatch:
    def test_constant_routes(self):
        ex = experts(3)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
        out = mle_dispatch(x, [2, 2, 2, 2], ex)
        np.testing.assert_allclose(out.data, ffn_forward(x, ex[1]).data)

    def test_identical_experts_ignore_routes(self):
        e = experts(1)[0]
        x = Tensor(np.random.default_rng(1).normal(size=(5, 2)))
        a = mle_dispatch(x, [1, 2, 3, 1, 2], [e, e, e]).data
        b = mle_dispatch(x, [3, 3, 1, 2, 1], [e, e, e]).data
        np.testing.assert_allclose(a, b)

    def test_per_frame_hand_oracle(self):
        ex = experts(2)
        x = np.array([[1.0, -1.0], [0.5, 2.0], [0.0, 0.3]])
        routes = [1, 2, 1]
        out = mle_dispatch(Tensor(x), routes, ex).data
        for t, k in enumerate(routes):
            e = ex[k - 1]
            h = np.maximum(x[t] @ e.w1.data + e.b1.data, 0)
            np.testing.assert_allclose(out[t], h @ e.w2.data + e.b2.data)

    def test_out_of_range_route(self):
        with pytest.raises(AssertionError, match="out of range"):
            mle_dispatch(Tensor(np.zeros((2, 2))), [1, 3], experts(2))

    @pytest.mark.parametrize("K", [2, 4, 8, 16])
    def test_flops_independent_of_K(self, K):
        x = Tensor(np.random.default_rng(0).normal(size=(12, 2)))
        routes = (np.arange(12) % K) + 1
        with nx.count_flops() as c:
            mle_dispatch(x, routes, experts(K))
        with nx.count_flops() as ref:
            ffn_forward(x, experts(1)[0])
        assert c[0] == ref[0]

    def test_gradient_isolation(self):
        ex = experts(3)
        x = Tensor(np.random.default_rng(5).normal(size=(6, 2)), requires_grad=True)
        routes = [1, 1, 3, 1, 3, 1]
        nx.backward(nx.sum_all(mle_dispatch(x, routes, ex)))
        for t in (ex[1].w1, ex[1].b1, ex[1].w2, ex[1].b2):
            assert t.grad is None or not np.any(t.grad)
        assert np.any(ex[0].w1.grad) and np.any(ex[2].w1.grad)

    def test_gradcheck(self):
        ex = experts(2, seed=3)
        x = Tensor(np.random.default_rng(6).normal(size=(5, 2)), requires_grad=True)
        params = [x] + [t for e in ex for t in (e.w1, e.b1, e.w2, e.b2)]
        w = np.random.default_rng(7).uniform(-1, 1, size=(5, 2))
        nx.gradcheck(lambda: nx.sum_all(nx.mul_const(mle_dispatch(x, [2, 1, 1, 2, 2], ex), w)), params,
                     eps=1e-6, rtol=1e-4, atol=1e-8)


def test_smoe_dispatch_scales_by_gate():
    ex = experts(2)
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 2)))
    probs = Tensor(np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]]))
    top = probs.data.argmax(1)
    out = smoe_dispatch(x, probs, top, ex).data
    for t in range(4):
        e = ex[top[t]]
        expected = probs.data[t, top[t]] * ffn_forward(Tensor(x.data[t : t + 1]), e).data[0]
        np.testing.assert_allclose(out[t], expected)
