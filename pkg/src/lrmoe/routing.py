"""Gating and dispatch.

Language slots are 1..K; slot 0 of the LID gate is the CTC blank. Every
argmax breaks ties toward the lowest index (numpy's default).
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .encoder import FFNParams, ffn_forward
from .numerics import ShapeError, Tensor

FALLBACK_LANGUAGE = 1


@dataclass
class LidRouter:
    """Linear frame-level LID gate with K+1 outputs (blank + K languages)."""

    w: Tensor
    b: Tensor

    @property
    def num_languages(self) -> int:
        return self.w.shape[1] - 1

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, num_languages: int) -> "LidRouter":
        return cls(nx.init_uniform(rng, (d, num_languages + 1), d), nx.zeros((num_languages + 1,)))

    def named(self, prefix: str = "router") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class GateParams:
    """Per-layer softmax gate of an sMoE layer."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, n: int) -> "GateParams":
        return cls(nx.init_uniform(rng, (d, n), d), nx.zeros((n,)))

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class RoutingAlignment:
    routes: list[int]
    source_greedy: list[int]
    degenerate: bool = False


@dataclass
class BalanceStats:
    f: np.ndarray
    p_mean: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.p_mean = np.asarray(self.p_mean, dtype=np.float64)
        self.n = len(self.f)


def lid_logits(h: Tensor, router: LidRouter) -> Tensor:
    if h.shape[-1] != router.w.shape[0]:
        raise ShapeError(f"lid_logits: input width {h.shape[-1]} != router input {router.w.shape[0]}")
    return nx.linear(h, router.w, router.b)


def smoe_gate(h: Tensor, gate: GateParams) -> tuple[Tensor, np.ndarray]:
    """Router probabilities for each row and the top-1 expert per row."""
    p = nx.softmax(nx.linear(h, gate.w, gate.b))
    return p, np.argmax(p.data, axis=-1)


def balance_loss(stats: BalanceStats) -> float:
    # scaling f by n first and summing with fsum keeps the uniform case at exactly 1.0
    return math.fsum((stats.n * stats.f) * stats.p_mean)


def balance_loss_tensor(probs: Tensor, top1: np.ndarray) -> tuple[Tensor, BalanceStats]:
    """Differentiable balance loss over the rows of ``probs`` [rows, n].

    The dispatch fractions are constants; gradient reaches the gate through
    the mean probabilities.
    """
    n = probs.shape[1]
    f = np.bincount(top1, minlength=n) / len(top1)
    p_mean = nx.mean_rows(probs)
    loss = nx.mul(nx.sum_all(nx.mul_const(p_mean, f.astype(probs.dtype))), float(n))
    return loss, BalanceStats(f, p_mean.data)


def densify_alignment(source_greedy: Sequence[int], fallback: int = FALLBACK_LANGUAGE) -> RoutingAlignment:
    """Fill CTC blanks with the most recent language.

    Frames before the first non-blank take that first language; an all-blank
    sequence routes every frame to ``fallback`` and is flagged degenerate.
    """
    src = [int(s) for s in source_greedy]
    first = next((s for s in src if s != 0), None)
    if first is None:
        return RoutingAlignment([fallback] * len(src), src, degenerate=True)
    routes = []
    cur = first
    for s in src:
        if s != 0:
            cur = s
        routes.append(cur)
    return RoutingAlignment(routes, src)


def utterance_pool(r: Tensor) -> Tensor:
    """Mean over time of LID logits [T, K+1]."""
    if r.shape[0] < 1:
        raise ValueError("utterance_pool needs at least one frame")
    return nx.mean_rows(r)


def utterance_route(r_u: np.ndarray) -> int:
    """Argmax over the language slots, blank excluded."""
    r_u = np.asarray(r_u)
    return int(np.argmax(r_u[1:])) + 1


def mle_dispatch(x: Tensor, routes: Sequence[int], experts: Sequence[FFNParams]) -> Tensor:
    """Apply ``experts[routes[t] - 1]`` to row ``t`` of ``x`` [rows, d].

    Each row passes through exactly one expert; untouched experts see no
    computation and receive no gradient.
    """
    routes = np.asarray(routes, dtype=np.int64)
    if routes.shape != (x.shape[0],):
        raise ShapeError(f"mle_dispatch: {len(routes)} routes for {x.shape[0]} rows")
    if routes.size and (routes.min() < 1 or routes.max() > len(experts)):
        raise AssertionError(f"route index out of range [1, {len(experts)}]: {sorted(set(routes.tolist()))}")
    parts = []
    for k in range(1, len(experts) + 1):
        rows = np.flatnonzero(routes == k)
        if rows.size:
            parts.append((ffn_forward(nx.gather_rows(x, rows), experts[k - 1]), rows))
    if not parts:
        return nx.mul(x, 0.0)
    return nx.scatter_rows(parts, x.shape[0])


def smoe_dispatch(x: Tensor, probs: Tensor, top1: np.ndarray, experts: Sequence[FFNParams]) -> Tensor:
    """Top-1 switch dispatch; each expert output is scaled by its gate probability."""
    gate = nx.reshape(nx.pick(probs, top1), (-1, 1))
    parts = []
    for e, expert in enumerate(experts):
        rows = np.flatnonzero(top1 == e)
        if rows.size:
            y = ffn_forward(nx.gather_rows(x, rows), expert)
            g = nx.reshape(nx.gather_rows(gate, rows), (-1,))
            parts.append((nx.scale_rows(y, g), rows))
    return nx.scatter_rows(parts, x.shape[0])
