"""Synthetic multilingual and code-switching corpus.

Each language owns a disjoint range of token ids in one global vocabulary
(id 0 is the CTC blank). A token emits frames around a mean vector:

    mean = sharing * phone[perm_k(j)] + (1 - sharing) * B_k z_kj + c_k

``phone`` is an inventory shared by all languages (each language permutes
it), ``B_k`` spans a language-specific random subspace and ``c_k`` is the
language centre; centres are pairwise ``margin`` apart. With high sharing
the same sound means different tokens in different languages, so the
language must be inferred from context.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CS = "cs"


class CorpusFormatError(ValueError):
    pass


@dataclass
class CorpusConfig:
    vocab_sizes: list[int] = field(default_factory=lambda: [10, 10, 10])
    feat_dim: int = 16
    noise_sigma: float = 0.6
    margin: float = 1.0
    phone_sharing: float = 1.0
    subspace_dim: int = 6
    frames_per_token: tuple[int, int] = (8, 14)
    tokens_per_utterance: tuple[int, int] = (4, 10)
    train_mono_per_language: int = 400
    train_cs: int = 800
    eval_mono_per_language: int = 60
    eval_cs: int = 120
    seed: int = 0

    @property
    def num_languages(self) -> int:
        return len(self.vocab_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_token"] = list(self.frames_per_token)
        d["tokens_per_utterance"] = list(self.tokens_per_utterance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus config key {sorted(unknown)[0]!r}")
        d = dict(d)
        for key in ("frames_per_token", "tokens_per_utterance"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)


@dataclass
class LanguageSpec:
    id: int
    vocab_size: int
    token_offset: int  # global id of this language's first token
    emission: np.ndarray  # [vocab_size, F]
    frames_per_token: tuple[int, int] = (8, 14)
    noise_sigma: float = 0.6

    @property
    def token_range(self) -> tuple[int, int]:
        return self.token_offset, self.token_offset + self.vocab_size - 1

    def emission_of(self, token: int) -> np.ndarray:
        return self.emission[token - self.token_offset]


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, F] float32
    tokens: list[int]
    lid_labels: list[int]
    language: int | str  # language id, or "cs"
    segment_spans: list[tuple[int, int, int]]  # (language, first token, end token exclusive)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.tokens == other.tokens
            and self.lid_labels == other.lid_labels
            and self.language == other.language
            and [tuple(s) for s in self.segment_spans] == [tuple(s) for s in other.segment_spans]
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


def make_languages(cfg: CorpusConfig) -> list[LanguageSpec]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0DE]))
    K, F = cfg.num_languages, cfg.feat_dim
    n_phones = max(cfg.vocab_sizes)
    phones = rng.normal(size=(n_phones, F))
    # orthonormal language directions, scaled so centres are `margin` apart
    q, _ = np.linalg.qr(rng.normal(size=(F, max(K, 1))))
    centres = q.T[:K] * (cfg.margin / np.sqrt(2.0))
    specs, offset = [], 1
    for k, v in enumerate(cfg.vocab_sizes):
        basis, _ = np.linalg.qr(rng.normal(size=(F, cfg.subspace_dim)))
        z = rng.normal(size=(v, cfg.subspace_dim))
        perm = rng.permutation(n_phones)[:v]
        emission = cfg.phone_sharing * phones[perm] + (1 - cfg.phone_sharing) * z @ basis.T + centres[k]
        specs.append(
            LanguageSpec(k + 1, v, offset, emission.astype(np.float32), tuple(cfg.frames_per_token), cfg.noise_sigma)
        )
        offset += v
    return specs


def vocab_partition(specs: Sequence[LanguageSpec]) -> list[tuple[int, int]]:
    return [s.token_range for s in specs]


def derive_lid_labels(tokens: Sequence[int], partition: Sequence[tuple[int, int]]) -> list[int]:
    """Replace every token by the id (1-based) of the language whose range holds it."""
    out = []
    for tok in tokens:
        for k, (lo, hi) in enumerate(partition, start=1):
            if lo <= tok <= hi:
                out.append(k)
                break
        else:
            raise ValueError(f"token {tok} lies outside every language range")
    return out


def _split_lengths(rng: np.random.Generator, total: int, parts: int) -> list[int]:
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    bounds = [0, *cuts.tolist(), total]
    return [b - a for a, b in zip(bounds, bounds[1:])]


def generate_utterance(
    specs: Sequence[LanguageSpec], kind: int | str, len_tokens: int, rng_seed, utt_id: str | None = None
) -> Utterance:
    """One utterance. ``kind`` is a language id (monolingual) or ``"cs"``.

    Code-switched utterances have 2-4 contiguous segments (capped by the
    token count) and adjacent segments differ in language.
    """
    K = len(specs)
    if len_tokens < 1:
        raise ValueError("len_tokens must be >= 1")
    rng = np.random.default_rng(rng_seed)
    if kind == CS:
        if K < 2:
            raise ValueError("code-switching needs at least two languages")
        if len_tokens < 2:
            raise ValueError("code-switching needs at least two tokens")
        n_seg = min(int(rng.integers(2, 5)), len_tokens)
        seg_lens = _split_lengths(rng, len_tokens, n_seg)
        langs = [int(rng.integers(1, K + 1))]
        for _ in range(n_seg - 1):
            choices = [k for k in range(1, K + 1) if k != langs[-1]]
            langs.append(int(rng.choice(choices)))
    else:
        if not isinstance(kind, (int, np.integer)) or not 1 <= kind <= K:
            raise ValueError(f"monolingual kind must be a language id in [1, {K}], got {kind!r}")
        seg_lens, langs = [len_tokens], [int(kind)]

    tokens, lid, spans, frames = [], [], [], []
    for lang, n in zip(langs, seg_lens):
        spec = specs[lang - 1]
        start = len(tokens)
        for _ in range(n):
            tok = spec.token_offset + int(rng.integers(spec.vocab_size))
            lo, hi = spec.frames_per_token
            reps = int(rng.integers(lo, hi + 1))
            mean = spec.emission_of(tok)
            noise = rng.normal(size=(reps, mean.shape[0])) * spec.noise_sigma if spec.noise_sigma else 0.0
            frames.append((mean[None, :] + noise).astype(np.float32))
            tokens.append(tok)
            lid.append(lang)
        spans.append((lang, start, len(tokens)))
    return Utterance(
        id=utt_id or f"utt-{rng_seed}",
        features=np.concatenate(frames).astype(np.float32),
        tokens=tokens,
        lid_labels=lid,
        language=CS if kind == CS else int(kind),
        segment_spans=spans,
    )


def utterance_seed(base_seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, zlib.crc32(split.encode()), index])


def generate_corpus(cfg: CorpusConfig) -> dict[str, list[Utterance]]:
    """Splits ``train`` (mono and code-switched, shuffled), ``eval_mono_<k>`` and ``eval_cs``."""
    specs = make_languages(cfg)
    K = cfg.num_languages
    lo, hi = cfg.tokens_per_utterance

    def make(split: str, kinds: list) -> list[Utterance]:
        out = []
        for i, kind in enumerate(kinds):
            seed = utterance_seed(cfg.seed, split, i)
            n = int(np.random.default_rng([*seed.entropy, 1]).integers(lo, hi + 1))
            if kind == CS:
                n = max(n, 2)
            out.append(generate_utterance(specs, kind, n, seed, utt_id=f"{split}-{i:05d}"))
        return out

    train_kinds: list = [k for k in range(1, K + 1) for _ in range(cfg.train_mono_per_language)]
    if K >= 2:
        train_kinds += [CS] * cfg.train_cs
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])).permutation(len(train_kinds))
    splits = {"train": make("train", [train_kinds[i] for i in order])}
    for k in range(1, K + 1):
        splits[f"eval_mono_{k}"] = make(f"eval_mono_{k}", [k] * cfg.eval_mono_per_language)
    if K >= 2:
        splits["eval_cs"] = make("eval_cs", [CS] * cfg.eval_cs)
    return splits


# ---------------------------------------------------------------------------
# JSONL I/O


def utterance_to_json(u: Utterance) -> dict:
    return {
        "id": u.id,
        "language": u.language,
        "tokens": list(map(int, u.tokens)),
        "lid_labels": list(map(int, u.lid_labels)),
        "segment_spans": [list(map(int, s)) for s in u.segment_spans],
        # float32 -> float64 -> repr round-trips exactly
        "frames": u.features.astype(np.float64).tolist(),
    }


def utterance_from_json(obj: dict) -> Utterance:
    frames = np.asarray(obj["frames"], dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("frames must be a 2-D array")
    language = obj["language"]
    if language != CS:
        language = int(language)
    u = Utterance(
        id=str(obj["id"]),
        features=frames.astype(np.float32),
        tokens=[int(t) for t in obj["tokens"]],
        lid_labels=[int(t) for t in obj["lid_labels"]],
        language=language,
        segment_spans=[tuple(int(v) for v in s) for s in obj["segment_spans"]],
    )
    if len(u.lid_labels) != len(u.tokens):
        raise ValueError("lid_labels and tokens differ in length")
    return u


def write_corpus(utterances: Iterable[Utterance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            fh.write(json.dumps(utterance_to_json(u), separators=(",", ":")))
            fh.write("\n")


def read_corpus(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(utterance_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


def write_splits(splits: dict[str, list[Utterance]], out_dir, cfg: CorpusConfig) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "splits": {}}
    for name, utts in splits.items():
        write_corpus(utts, out_dir / f"{name}.jsonl")
        manifest["splits"][name] = {"file": f"{name}.jsonl", "utterances": len(utts)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_splits(data_dir) -> tuple[dict[str, list[Utterance]], CorpusConfig]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    splits = {name: read_corpus(data_dir / info["file"]) for name, info in manifest["splits"].items()}
    return splits, CorpusConfig.from_dict(manifest["config"])
