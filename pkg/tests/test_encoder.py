import math

import numpy as np
import pytest

from lrmoe import numerics as nx
from lrmoe.encoder import (
    AttentionParams,
    EncoderLayerParams,
    FFNParams,
    FrontendParams,
    UtteranceTooShort,
    encoder_layer_forward,
    frontend_param_count,
    positional_encoding,
    subsample,
    subsampled_length,
)
from lrmoe.numerics import ShapeError, Tensor


def frontend(seed=0, feat=16, ch=4, d=8, dtype=np.float32):
    fp = FrontendParams.init(np.random.default_rng(seed), feat, ch, d)
    for _, t in fp.named("f"):
        t.data = t.data.astype(dtype)
    return fp


def layer(seed=0, d=8, d_ff=16, heads=2, dtype=np.float64):
    lp = EncoderLayerParams.init(np.random.default_rng(seed), d, d_ff, heads)
    for _, t in lp.named("l"):
        t.data = t.data.astype(dtype)
    return lp


class TestSubsample:
    @pytest.mark.parametrize("T,expected", [(100, 25), (3000, 750), (5, 2), (4, 1), (7, 2), (9, 3)])
    def test_length_arithmetic(self, T, expected):
        assert subsampled_length(T) == expected == math.ceil(math.ceil(T / 2) / 2)

    def test_output_shape(self):
        x, lengths = subsample(Tensor(np.zeros((1, 100, 16), np.float32)), frontend())
        assert x.shape == (1, 25, 8) and lengths.tolist() == [25]

    def test_too_short(self):
        with pytest.raises(UtteranceTooShort, match="too short"):
            subsample(Tensor(np.zeros((1, 3, 16), np.float32)), frontend())

    def test_padding_does_not_leak(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(37, 16)).astype(np.float32)
        fp = frontend()
        alone, _ = subsample(Tensor(a[None]), fp)
        padded = np.zeros((2, 60, 16), np.float32)
        padded[0, :37] = a
        padded[1] = rng.normal(size=(60, 16))
        padded[0, 37:] = 99.0  # garbage in the padding
        batch, lengths = subsample(Tensor(padded), fp, np.array([37, 60]))
        n = lengths[0]
        np.testing.assert_allclose(batch.data[0, :n], alone.data[0], atol=1e-5)

    def test_param_count(self):
        fp = frontend(feat=80, ch=6, d=10)
        assert sum(t.data.size for _, t in fp.named("f")) == frontend_param_count(80, 6, 10)


class TestPositionalEncoding:
    def test_first_row(self):
        pe = positional_encoding(3, 8)
        np.testing.assert_allclose(pe[0], [0, 1] * 4)

    def test_range(self):
        pe = positional_encoding(500, 64)
        assert pe.min() >= -1 and pe.max() <= 1

    def test_direct_value(self):
        assert positional_encoding(2, 4)[1, 0] == pytest.approx(math.sin(1), abs=1e-6)
        assert math.sin(1) == pytest.approx(0.8415, abs=1e-4)

    def test_odd_dim(self):
        with pytest.raises(ValueError):
            positional_encoding(4, 5)


class TestEncoderLayer:
    def test_zero_input_zero_biases(self):
        lp = layer()
        out = encoder_layer_forward(Tensor(np.zeros((5, 8))), lp)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_hand_computed_attention(self):
        # d=2, one head, identity projections, zero FFN; LN affine left at (1, 0)
        eye = np.eye(2)
        z = lambda *s: Tensor(np.zeros(s))
        attn = AttentionParams(Tensor(eye), z(2), Tensor(eye), z(2), Tensor(eye), z(2), Tensor(eye), z(2))
        lp = EncoderLayerParams(attn, Tensor(np.ones(2)), z(2), Tensor(np.ones(2)), z(2), heads=1,
                                ffn=FFNParams(z(2, 3), z(3), z(3, 2), z(2)))
        x = np.array([[1.0, 0.0], [0.0, 2.0]])
        s = x @ x.T / math.sqrt(2)
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        y = x + a @ x

        def ln(v, eps=1e-5):
            mu = v.mean(1, keepdims=True)
            return (v - mu) / np.sqrt(v.var(1, keepdims=True) + eps)

        expected = ln(ln(y))
        out = encoder_layer_forward(Tensor(x), lp)
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        lp = layer(seed=3)
        x = rng.normal(size=(7, 8))
        base = encoder_layer_forward(Tensor(x), lp).data
        for _ in range(5):
            perm = rng.permutation(7)
            out = encoder_layer_forward(Tensor(x[perm]), lp).data
            np.testing.assert_allclose(out, base[perm], atol=1e-10)

    def test_padding_invariance(self):
        rng = np.random.default_rng(4)
        lp = layer(seed=4, dtype=np.float32)
        x = rng.normal(size=(6, 8)).astype(np.float32)
        alone = encoder_layer_forward(Tensor(x[None]), lp, np.ones((1, 6), bool)).data[0]
        padded = np.concatenate([x, rng.normal(size=(5, 8)).astype(np.float32) * 10])
        mask = np.arange(11) < 6
        out = encoder_layer_forward(Tensor(padded[None]), lp, mask[None]).data[0]
        assert np.max(np.abs(out[:6] - alone)) <= 1e-6
        np.testing.assert_array_equal(out[6:], 0.0)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            encoder_layer_forward(Tensor(np.zeros((3, 6))), layer())

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            EncoderLayerParams.init(np.random.default_rng(0), 8, 16, 3)

    def test_gradcheck_through_layer(self):
        rng = np.random.default_rng(5)
        lp = layer(seed=5)
        x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
        mask = np.array([[True, True, True, False]])
        params = [t for _, t in lp.named("l")]
        for p in params:
            p.requires_grad = True
        w = rng.uniform(-1, 1, size=(1, 4, 8))
        worst = nx.gradcheck(
            lambda: nx.sum_all(nx.mul_const(encoder_layer_forward(x, lp, mask), w)),
            [x] + params,
            eps=1e-5,
            rtol=1e-4,
            atol=1e-7,
            max_checks=12,
        )
        assert worst <= 1e-4

    def test_gradcheck_through_frontend(self):
        rng = np.random.default_rng(6)
        fp = frontend(seed=6, feat=9, ch=2, d=4, dtype=np.float64)
        feats = Tensor(rng.normal(size=(1, 9, 9)), requires_grad=True)
        params = [t for _, t in fp.named("f")]
        for p in params:
            p.requires_grad = True
        w = rng.uniform(-1, 1, size=(1, 3, 4))
        worst = nx.gradcheck(
            lambda: nx.sum_all(nx.mul_const(subsample(feats, fp)[0], w)), [feats] + params, eps=1e-5, rtol=1e-4, atol=1e-7
        )
        assert worst <= 1e-4
