"""Connectionist temporal classification: loss, greedy collapse, prefix beam search.

Index 0 is the blank symbol everywhere. Label sequences are plain lists of
ints in ``[1, V)``.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from . import numerics as nx

BLANK = 0
NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The label sequence cannot be aligned to the given number of frames."""


def required_length(labels: Sequence[int]) -> int:
    """Minimum frames needed: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _check_labels(labels: Sequence[int], vocab: int) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.size and (arr.min() < 1 or arr.max() >= vocab):
        raise ValueError(f"labels must lie in [1, {vocab - 1}], got {list(labels)}")
    return arr


def _logsumexp2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.logaddexp(a, b)


def ctc_loss(log_probs: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is [T, V]. The gradient treats every entry as a free input,
    so it equals minus the per-frame label occupancy.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    lab = _check_labels(labels, V)
    need = required_length(lab.tolist())
    if T < need:
        raise CTCInfeasibleError(f"infeasible alignment: {T} frames for labels needing {need}")

    S = 2 * lab.size + 1
    ext = np.zeros(S, dtype=np.int64)
    ext[1::2] = lab
    # skip transition s-2 -> s allowed into a label that differs from the previous label
    skip = np.zeros(S, dtype=bool)
    if lab.size > 1:
        skip[3::2] = lab[1:] != lab[:-1]

    emit = lp[:, ext]  # [T, S]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _logsumexp2(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _logsumexp2(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _logsumexp2(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], _logsumexp2(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    occ = np.exp(alpha + beta - emit - log_p)  # [T, S], state occupancy
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def ctc_loss_tensor(log_probs: nx.Tensor, labels: Sequence[int]) -> nx.Tensor:
    """``ctc_loss`` as a graph op on a [T, V] tensor; returns a scalar tensor."""
    nll, grad = ctc_loss(log_probs.data, labels)
    g_local = grad.astype(log_probs.dtype)
    return nx._make(
        np.asarray(nll, dtype=log_probs.dtype), (log_probs,), lambda g: log_probs.accumulate(g * g_local)
    )


def greedy_collapse(frame_argmax: Sequence[int]) -> list[int]:
    """Merge runs of identical symbols, then drop blanks."""
    out: list[int] = []
    prev = None
    for k in frame_argmax:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    return greedy_collapse(np.argmax(np.asarray(log_probs), axis=-1).tolist())


def sequence_log_prob(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """log P(labels | log_probs), or -inf when no alignment exists."""
    try:
        nll, _ = ctc_loss(log_probs, labels)
    except CTCInfeasibleError:
        return float("-inf")
    return -nll


def prefix_beam_search(log_probs: np.ndarray, beam: int = 10, return_score: bool = False):
    """CTC prefix beam search.

    Each prefix carries separate log-probabilities of ending in blank and in
    a non-blank symbol. At equal scores the lexicographically smaller prefix
    (hence the shorter one when one is a prefix of the other) wins.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(T):
        row = lp[t]
        nb: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            entry = nb[prefix]
            entry[0] = np.logaddexp(entry[0], total + row[BLANK])
            last = prefix[-1] if prefix else None
            for k in range(1, V):
                p = row[k]
                if p == NEG_INF:
                    continue
                if k == last:
                    # repeat without a blank stays in the same prefix
                    entry[1] = np.logaddexp(entry[1], pnb + p)
                    ext = nb[prefix + (k,)]
                    ext[1] = np.logaddexp(ext[1], pb + p)
                else:
                    ext = nb[prefix + (k,)]
                    ext[1] = np.logaddexp(ext[1], total + p)
        ranked = sorted(nb.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam]}
    best, (pb, pnb) = min(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
    if return_score:
        return list(best), float(np.logaddexp(pb, pnb))
    return list(best)


def ctc_loss_batch(
    log_probs: nx.Tensor, lengths: Sequence[int], labels: Sequence[Sequence[int]]
) -> tuple[nx.Tensor, np.ndarray]:
    """Per-utterance CTC losses for a padded batch [B, T, V].

    Returns a [B] tensor of negative log-likelihoods and a boolean array of
    feasible utterances; infeasible ones contribute 0 and no gradient.
    """
    bsz = log_probs.shape[0]
    nll = np.zeros(bsz, dtype=log_probs.dtype)
    ok = np.zeros(bsz, dtype=bool)
    grads = np.zeros_like(log_probs.data)
    for b in range(bsz):
        n = int(lengths[b])
        try:
            val, g = ctc_loss(log_probs.data[b, :n], labels[b])
        except CTCInfeasibleError:
            continue
        nll[b] = val
        grads[b, :n] = g
        ok[b] = True

    def backward(g):
        log_probs.accumulate(grads * g[:, None, None])

    return nx._make(nll, (log_probs,), backward), ok
