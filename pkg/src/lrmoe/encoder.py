"""Transformer encoder pieces: conv subsampling, sinusoidal positions,
multi-head self-attention, position-wise FFN, post-norm residuals.

Activations are batched as [B, T, d] with a boolean validity mask [B, T];
single utterances may be passed as [T, d].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

MASK_VALUE = -1e9


class UtteranceTooShort(ValueError):
    pass


def conv_out_len(n: int) -> int:
    """Frames after one stride-2, kernel-3 convolution padded by one frame."""
    return (n + 1) // 2


def subsampled_length(n: int) -> int:
    return conv_out_len(conv_out_len(n))


def freq_out_len(f: int) -> int:
    """Frequency bins after one unpadded stride-2, kernel-3 convolution."""
    return (f - 3) // 2 + 1


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_ff: int) -> "FFNParams":
        return cls(
            nx.init_uniform(rng, (d, d_ff), d),
            nx.zeros((d_ff,)),
            nx.init_uniform(rng, (d_ff, d), d_ff),
            nx.zeros((d,)),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{key}", getattr(self, key)


def ffn_forward(x: Tensor, p: FFNParams) -> Tensor:
    return nx.linear(nx.relu(nx.linear(x, p.w1, p.b1)), p.w2, p.b2)


def ffn_param_count(d: int, d_ff: int) -> int:
    return 2 * d * d_ff + d_ff + d


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "AttentionParams":
        parts = []
        for _ in range(4):
            parts += [nx.init_uniform(rng, (d, d), d), nx.zeros((d,))]
        return cls(*parts)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}.{key}", getattr(self, key)


@dataclass
class EncoderLayerParams:
    """One post-norm block. ``ffn`` is None in MLE layers, whose FFN slot
    is supplied by the caller."""

    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    heads: int
    ffn: FFNParams | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_ff: int | None, heads: int) -> "EncoderLayerParams":
        if d % heads:
            raise ValueError(f"model dim {d} is not divisible by {heads} heads")
        attn = AttentionParams.init(rng, d)
        ffn = FFNParams.init(rng, d, d_ff) if d_ff else None
        return cls(attn, nx.ones((d,)), nx.zeros((d,)), nx.ones((d,)), nx.zeros((d,)), heads, ffn)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.attn.named(f"{prefix}.attn")
        for key in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f"{prefix}.{key}", getattr(self, key)
        if self.ffn is not None:
            yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class FrontendParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, feat_dim: int, channels: int, d: int) -> "FrontendParams":
        f2 = freq_out_len(freq_out_len(feat_dim))
        if f2 < 1:
            raise ValueError(f"feature dim {feat_dim} too small for two stride-2 convolutions")
        return cls(
            nx.init_uniform(rng, (channels, 1, 3, 3), 9),
            nx.zeros((channels,)),
            nx.init_uniform(rng, (channels, channels, 3, 3), 9 * channels),
            nx.zeros((channels,)),
            nx.init_uniform(rng, (channels * f2, d), channels * f2),
            nx.zeros((d,)),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "out_w", "out_b"):
            yield f"{prefix}.{key}", getattr(self, key)


def frontend_param_count(feat_dim: int, channels: int, d: int) -> int:
    f2 = freq_out_len(freq_out_len(feat_dim))
    return (9 * channels + channels) + (9 * channels * channels + channels) + (channels * f2 * d + d)


def _time_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


def subsample(features: Tensor, params: FrontendParams, lengths=None) -> tuple[Tensor, np.ndarray]:
    """Two stride-2 3x3 convolutions over (time, frequency) with ReLU, then a
    linear map to the model dim.

    features: [T, F] or [B, T, F]. Time is padded by one frame per side so the
    output has ceil(ceil(T/2)/2) frames; frequency is unpadded. Returns the
    subsampled activations and per-utterance output lengths.
    """
    single = features.ndim == 2
    x = nx.reshape(features, (1,) + features.shape) if single else features
    bsz, t, _ = x.shape
    lengths = np.full(bsz, t) if lengths is None else np.asarray(lengths)
    if lengths.min() < 4:
        raise UtteranceTooShort(f"utterance too short: {int(lengths.min())} frames, need at least 4")
    h = nx.reshape(x, (bsz, 1, t, x.shape[2]))
    if lengths.min() < t:
        keep = _time_mask(lengths, t)[:, None, :, None]
        h = nx.mul_const(h, np.broadcast_to(keep, h.shape).astype(h.dtype))
    for w, b in ((params.conv1_w, params.conv1_b), (params.conv2_w, params.conv2_b)):
        h = nx.relu(nx.conv2d(h, w, b, stride=2, pad=(1, 0)))
        lengths = (lengths + 1) // 2
        # zero frames past each utterance end so padding never leaks into later convs
        keep = _time_mask(lengths, h.shape[2])[:, None, :, None]
        h = nx.mul_const(h, np.broadcast_to(keep, h.shape))
    _, c, t2, f2 = h.shape
    h = nx.reshape(nx.transpose(h, (0, 2, 1, 3)), (bsz, t2, c * f2))
    out = nx.linear(h, params.out_w, params.out_b)
    if single:
        out = nx.reshape(out, out.shape[1:])
    return out, lengths


def positional_encoding(T: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"positional encoding needs an even dim, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    div = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe.astype(np.float32)


def add_positions(x: Tensor) -> Tensor:
    pe = positional_encoding(x.shape[-2], x.shape[-1]).astype(x.dtype)
    return nx.add_const(x, np.broadcast_to(pe, x.shape))


def self_attention(x: Tensor, p: AttentionParams, heads: int, mask: np.ndarray | None) -> Tensor:
    bsz, t, d = x.shape
    dh = d // heads

    def split(y: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(y, (bsz, t, heads, dh)), (0, 2, 1, 3))

    q = split(nx.linear(x, p.wq, p.bq))
    k = split(nx.linear(x, p.wk, p.bk))
    v = split(nx.linear(x, p.wv, p.bv))
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        key_mask = np.where(mask[:, None, None, :], 0.0, MASK_VALUE)
        scores = nx.add_const(scores, np.broadcast_to(key_mask, scores.shape))
    ctx = nx.matmul(nx.softmax(scores), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return nx.linear(ctx, p.wo, p.bo)


def encoder_layer_forward(
    x: Tensor,
    params: EncoderLayerParams,
    mask: np.ndarray | None = None,
    ffn: Callable[[Tensor], Tensor] | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """y = LN(x + MHSA(x)); out = LN(y + FFN(y)).

    ``mask`` [B, T] marks valid frames: padded keys get no attention weight
    and padded rows of the output are zeroed. ``ffn`` replaces the layer's own
    feed-forward (MLE layers).
    """
    single = x.ndim == 2
    if single:
        x = nx.reshape(x, (1,) + x.shape)
        if mask is not None:
            mask = np.asarray(mask)[None, :]
    if x.shape[-1] != params.ln1_g.shape[0]:
        raise ShapeError(f"encoder layer: input width {x.shape[-1]} != model dim {params.ln1_g.shape[0]}")
    y = nx.layer_norm(nx.add(x, self_attention(x, params.attn, params.heads, mask)), params.ln1_g, params.ln1_b, eps)
    if ffn is None:
        if params.ffn is None:
            raise ValueError("layer has no FFN and none was supplied")
        f = ffn_forward(y, params.ffn)
    else:
        f = ffn(y)
    out = nx.layer_norm(nx.add(y, f), params.ln2_g, params.ln2_b, eps)
    if mask is not None:
        out = nx.mul_const(out, np.broadcast_to(np.asarray(mask, dtype=out.dtype)[:, :, None], out.shape))
    if single:
        out = nx.reshape(out, out.shape[1:])
    return out


def attention_param_count(d: int) -> int:
    return 4 * (d * d + d)


def layer_param_count(d: int, d_ff: int | None) -> int:
    return attention_param_count(d) + 4 * d + (ffn_param_count(d, d_ff) if d_ff else 0)
