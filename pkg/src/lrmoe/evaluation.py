"""Error rates, utterance-level LID from routing, confusion matrices and
per-frame routing dumps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import CS, Utterance, derive_lid_labels
from .ctc import greedy_decode, prefix_beam_search
from .models import Model, forward_batch
from .routing import RoutingAlignment


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> tuple[int, int, int]:
    """Substitutions, deletions, insertions of a minimal alignment.

    Among alignments with the fewest edits the one with the most
    substitutions is taken, so swapping ``ref`` and ``hyp`` swaps D and I
    and leaves S unchanged.
    """
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, -substitutions); compared lexicographically
    cost = np.zeros((n + 1, m + 1, 2), dtype=np.int64)
    cost[:, 0, 0] = np.arange(n + 1)
    cost[0, :, 0] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = 0 if ref[i - 1] == hyp[j - 1] else 1
            cands = (
                (cost[i - 1, j - 1, 0] + sub, cost[i - 1, j - 1, 1] - sub),
                (cost[i - 1, j, 0] + 1, cost[i - 1, j, 1]),
                (cost[i, j - 1, 0] + 1, cost[i, j - 1, 1]),
            )
            cost[i, j] = min(cands)
    edits, neg_sub = cost[n, m]
    s = int(-neg_sub)
    # edits = s + d + i_, d - i_ = n - m
    d = (int(edits) - s + (n - m)) // 2
    return s, d, int(edits) - s - d


def token_error_rate(ref: Sequence[int], hyp: Sequence[int]) -> float:
    if not ref:
        raise ValueError("token error rate is undefined for an empty reference")
    return 100.0 * sum(edit_distance(ref, hyp)) / len(ref)


def utterance_lid_from_routes(alignment: RoutingAlignment | Sequence[int]) -> int:
    """Majority language over frames; ties go to the lowest id."""
    routes = alignment.routes if isinstance(alignment, RoutingAlignment) else list(alignment)
    if not routes:
        raise ValueError("no routes")
    return int(np.argmax(np.bincount(np.asarray(routes, dtype=np.int64))))


@dataclass
class UtteranceRecord:
    id: str
    split: str
    ref: list[int]
    hyp: list[int]
    edits: int
    language: int | str
    predicted_language: int | None
    degenerate: bool


@dataclass
class EvalReport:
    ter: dict[str, float]
    mer: float | None
    lid_accuracy: float
    confusion: list[list[int]]
    degenerate_routing_count: int
    excluded_empty_refs: int = 0
    records: list[UtteranceRecord] = field(default_factory=list)

    def to_json(self, include_records: bool = True) -> str:
        d = asdict(self)
        if not include_records:
            d.pop("records")
        return json.dumps(d, indent=2)


def decode(log_probs: np.ndarray, beam: int) -> list[int]:
    return prefix_beam_search(log_probs, beam) if beam > 1 else greedy_decode(log_probs)


def _predicted_language(model: Model, res, b: int, hyp: list[int]) -> tuple[int | None, bool]:
    if res.alignments is not None:
        al = res.alignments[b]
        return utterance_lid_from_routes(al), al.degenerate
    if res.utterance_routes is not None:
        return res.utterance_routes[b], False
    # no router: vote over the languages of the recognized tokens
    if not hyp:
        return None, True
    return utterance_lid_from_routes(derive_lid_labels(hyp, model.config.language_ranges())), False


def evaluate(model: Model, splits: dict[str, Sequence[Utterance]], beam: int = 10, batch_size: int = 32) -> EvalReport:
    """Decode every split; TER per split pools edits over reference tokens.

    ``eval_cs`` (any split whose utterances are code-switched) also yields
    the MER. LID accuracy and the confusion matrix cover monolingual
    utterances only.
    """
    K = model.config.num_languages
    confusion = np.zeros((K, K), dtype=np.int64)
    ter: dict[str, float] = {}
    records: list[UtteranceRecord] = []
    degenerate = excluded = 0
    cs_edits = cs_ref = 0
    for name, utts in splits.items():
        edits_total = ref_total = 0
        for start in range(0, len(utts), batch_size):
            chunk = utts[start : start + batch_size]
            with nx.no_grad():
                res = forward_batch(model, [u.features for u in chunk])
            for b, u in enumerate(chunk):
                n = int(res.lengths[b])
                hyp = decode(res.asr_log_probs.data[b, :n], beam)
                pred, degen = _predicted_language(model, res, b, hyp)
                degenerate += int(degen)
                if not u.tokens:
                    excluded += 1
                    continue
                e = sum(edit_distance(u.tokens, hyp))
                edits_total += e
                ref_total += len(u.tokens)
                if u.language == CS:
                    cs_edits += e
                    cs_ref += len(u.tokens)
                else:
                    confusion[u.language - 1, (pred or 1) - 1] += 1
                records.append(UtteranceRecord(u.id, name, list(u.tokens), hyp, e, u.language, pred, degen))
        if ref_total:
            ter[name] = 100.0 * edits_total / ref_total
    total = int(confusion.sum())
    return EvalReport(
        ter=ter,
        mer=100.0 * cs_edits / cs_ref if cs_ref else None,
        lid_accuracy=100.0 * float(np.trace(confusion)) / total if total else 0.0,
        confusion=confusion.tolist(),
        degenerate_routing_count=degenerate,
        excluded_empty_refs=excluded,
        records=records,
    )


def routing_report(model: Model, utterance: Utterance | np.ndarray) -> list[dict]:
    """Per subsampled frame: top ASR token and posterior, top LID class and
    posterior, and the densified route."""
    if model.config.variant != "flr_moe":
        raise ValueError(f"routing_report needs an flr_moe model, got {model.config.variant}")
    feats = utterance.features if isinstance(utterance, Utterance) else np.asarray(utterance)
    with nx.no_grad():
        res = forward_batch(model, [feats])
    n = int(res.lengths[0])
    asr = res.asr_log_probs.data[0, :n]
    lid = nx.softmax(nx.Tensor(res.lid_logits.data[0, :n])).data
    routes = res.alignments[0].routes
    rows = []
    for t in range(n):
        a, k = int(np.argmax(asr[t])), int(np.argmax(lid[t]))
        rows.append(
            {
                "frame": t,
                "asr_token": a,
                "asr_posterior": float(np.exp(asr[t, a])),
                "lid_class": k,
                "lid_posterior": float(lid[t, k]),
                "route": int(routes[t]),
            }
        )
    return rows


def routing_table(rows: list[dict]) -> str:
    """Aligned plain-text rendering of a routing dump."""
    head = f"{'frame':>5} {'asr_tok':>7} {'p_asr':>6} {'lid':>4} {'p_lid':>6} {'route':>5}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r['frame']:>5} {r['asr_token']:>7} {r['asr_posterior']:>6.3f} "
            f"{r['lid_class']:>4} {r['lid_posterior']:>6.3f} {r['route']:>5}"
        )
    return "\n".join(lines)
