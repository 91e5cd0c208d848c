"""CTC encoder variants and their cost accounting.

Variants:

* ``vallina``: L standard transformer layers.
* ``smoe``: N standard layers, then L-N layers whose FFN is a top-1 switch
  MoE with its own softmax gate per layer.
* ``ulr_moe`` / ``flr_moe``: N standard layers, then L-N layers whose FFN is
  a set of per-language experts. One LID gate, computed once on the output of
  layer N, routes every MoE layer: ULR sends the whole utterance to the argmax
  of the time-pooled LID logits, FLR sends each frame to the densified greedy
  LID-CTC alignment.

``lae``, ``multi_encoder`` and ``bi_encoder`` exist only as analytic cost
entries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ctc import ctc_loss_batch
from .encoder import (
    EncoderLayerParams,
    FFNParams,
    FrontendParams,
    add_positions,
    attention_param_count,
    encoder_layer_forward,
    ffn_param_count,
    freq_out_len,
    frontend_param_count,
    subsample,
    subsampled_length,
)
from .numerics import Tensor
from .routing import (
    BalanceStats,
    GateParams,
    LidRouter,
    RoutingAlignment,
    balance_loss_tensor,
    densify_alignment,
    lid_logits,
    mle_dispatch,
    smoe_dispatch,
    smoe_gate,
    utterance_route,
)

VARIANTS = ("vallina", "smoe", "ulr_moe", "flr_moe")
ANALYTIC_VARIANTS = ("lae", "multi_encoder", "bi_encoder")
LANGUAGE_ROUTED = ("ulr_moe", "flr_moe")

CHECKPOINT_MAGIC = b"LRMOE001"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelConfig:
    variant: str = "flr_moe"
    num_layers: int = 4
    num_shared: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    vocab_sizes: list[int] = field(default_factory=lambda: [10, 10, 10])
    feat_dim: int = 16
    subsample_channels: int | None = None
    lambda_lid: float = 0.3
    # weight of CTC in the CTC/attention hybrid; carried for provenance, unused without a decoder
    lambda_ctc: float = 0.3
    smoe_experts: int = 4
    balance_weight: float = 0.01
    ln_eps: float = 1e-5
    seed: int = 0
    # analytic baselines only
    lae_shared: int = 9
    lae_specific: int = 3

    @property
    def num_languages(self) -> int:
        return len(self.vocab_sizes)

    @property
    def vocab_size(self) -> int:
        return 1 + sum(self.vocab_sizes)

    @property
    def channels(self) -> int:
        return self.subsample_channels or self.d_model

    @property
    def num_moe_layers(self) -> int:
        return 0 if self.variant == "vallina" else self.num_layers - self.num_shared

    def language_ranges(self) -> list[tuple[int, int]]:
        """Inclusive global token-id range of each language (languages 1..K)."""
        out, lo = [], 1
        for v in self.vocab_sizes:
            out.append((lo, lo + v - 1))
            lo += v
        return out

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS + ANALYTIC_VARIANTS:
            raise ConfigError("variant", f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_layers < 1:
            raise ConfigError("num_layers", "must be >= 1")
        if not 0 <= self.num_shared <= self.num_layers:
            raise ConfigError("num_shared", f"requires 0 <= N <= L, got N={self.num_shared}, L={self.num_layers}")
        if self.variant == "vallina" and self.num_shared != self.num_layers:
            raise ConfigError("num_shared", f"vallina requires N == L, got N={self.num_shared}, L={self.num_layers}")
        if self.d_model % self.heads:
            raise ConfigError("heads", f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.d_model % 2:
            raise ConfigError("d_model", "must be even for sinusoidal positions")
        if not self.vocab_sizes or min(self.vocab_sizes) < 1:
            raise ConfigError("vocab_sizes", "need at least one language with a positive vocabulary")
        if self.variant in LANGUAGE_ROUTED and self.num_languages < 1:
            raise ConfigError("vocab_sizes", "language-routed variants need K >= 1")
        if self.variant == "smoe" and self.smoe_experts < 2:
            raise ConfigError("smoe_experts", "sMoE needs at least 2 experts")
        if freq_out_len(freq_out_len(self.feat_dim)) < 1:
            raise ConfigError("feat_dim", "must be >= 7 for two stride-2 convolutions")
        if self.lambda_lid < 0:
            raise ConfigError("lambda_lid", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config key")
        d = dict(d)
        if "vocab_sizes" in d:
            d["vocab_sizes"] = [int(v) for v in d["vocab_sizes"]]
        return cls(**d)


def split_vocab(total: int, num_languages: int) -> list[int]:
    """Split a global vocabulary (blank included) into near-equal language ranges."""
    rest = total - 1
    base = rest // num_languages
    return [base + (1 if i < rest % num_languages else 0) for i in range(num_languages)]


def paper_config(variant: str = "flr_moe", num_languages: int = 2, vocab: int | None = None, **kw) -> ModelConfig:
    """Full-size setup: 12 layers (6 shared), d=256, 4 heads, d_ff=2048, 80-dim
    filterbanks. Vocab defaults to 12064 for two languages and 15492 otherwise."""
    if vocab is None:
        vocab = 12064 if num_languages == 2 else 15492
    shared = 12 if variant == "vallina" else (0 if variant == "smoe" else 6)
    base = dict(
        variant=variant,
        num_layers=12,
        num_shared=shared,
        d_model=256,
        heads=4,
        d_ff=2048,
        vocab_sizes=split_vocab(vocab, num_languages),
        feat_dim=80,
    )
    base.update(kw)
    return ModelConfig(**base).validate()


# ---------------------------------------------------------------------------
# model


@dataclass
class MoELayer:
    experts: list[FFNParams]
    gate: GateParams | None = None


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.frontend: FrontendParams
        self.layers: list[EncoderLayerParams] = []
        self.moe: dict[int, MoELayer] = {}
        self.router: LidRouter | None = None
        self.out_w: Tensor
        self.out_b: Tensor

    def moe_layer_indices(self) -> list[int]:
        return sorted(self.moe)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = dict(self.frontend.named("frontend"))
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layers.{i}"))
            if i in self.moe:
                for k, expert in enumerate(self.moe[i].experts):
                    out.update(expert.named(f"layers.{i}.experts.{k}"))
                if self.moe[i].gate is not None:
                    out.update(self.moe[i].gate.named(f"layers.{i}.gate"))
        if self.router is not None:
            out.update(self.router.named("router"))
        out["output.w"] = self.out_w
        out["output.b"] = self.out_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def shared_parameter_names(self) -> list[str]:
        """Frontend and the first N layers (excluding any experts)."""
        n = self.config.num_shared
        return [
            k
            for k in self.named_parameters()
            if k.startswith("frontend.") or (k.startswith("layers.") and int(k.split(".")[1]) < n)
        ]

    def astype(self, dtype) -> "Model":
        for t in self.parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        nx.zero_grads(self.parameters())


def build(config: ModelConfig) -> Model:
    """Instantiate a model with deterministic initialization from ``config.seed``.

    Matrices are uniform in +-1/sqrt(fan_in); biases start at zero; layer-norm
    gains at one.
    """
    config.validate()
    if config.variant in ANALYTIC_VARIANTS:
        raise ConfigError("variant", f"{config.variant} is an analytic cost entry and cannot be built")
    rng = np.random.default_rng(config.seed)
    d, K = config.d_model, config.num_languages
    m = Model(config)
    m.frontend = FrontendParams.init(rng, config.feat_dim, config.channels, d)
    n_shared = config.num_layers if config.variant == "vallina" else config.num_shared
    for i in range(config.num_layers):
        dense = i < n_shared
        m.layers.append(EncoderLayerParams.init(rng, d, config.d_ff if dense else None, config.heads))
        if not dense:
            if config.variant == "smoe":
                n = config.smoe_experts
                m.moe[i] = MoELayer([FFNParams.init(rng, d, config.d_ff) for _ in range(n)], GateParams.init(rng, d, n))
            else:
                m.moe[i] = MoELayer([FFNParams.init(rng, d, config.d_ff) for _ in range(K)])
    if config.variant in LANGUAGE_ROUTED:
        m.router = LidRouter.init(rng, d, K)
    m.out_w = nx.init_uniform(rng, (d, config.vocab_size), d)
    m.out_b = nx.zeros((config.vocab_size,))
    return m


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    asr_log_probs: Tensor  # [B, T', V]
    lengths: np.ndarray  # valid T' per utterance
    lid_logits: Tensor | None = None  # [B, T', K+1]
    alignments: list[RoutingAlignment] | None = None
    utterance_routes: list[int] | None = None
    gate_stats: list[BalanceStats] = field(default_factory=list)
    balance: Tensor | None = None


def pad_batch(features: Sequence[np.ndarray], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(f) for f in features])
    out = np.zeros((len(features), lengths.max(), features[0].shape[1]), dtype=dtype)
    for b, f in enumerate(features):
        out[b, : len(f)] = f
    return out, lengths


def _route(model: Model, x: Tensor, mask: np.ndarray, lengths: np.ndarray, res: ForwardResult) -> np.ndarray:
    """Run the shared LID gate once and return a language per valid frame (flat)."""
    r = lid_logits(x, model.router)
    res.lid_logits = r
    per_utt = []
    if model.config.variant == "flr_moe":
        res.alignments = []
        for b, n in enumerate(lengths):
            al = densify_alignment(np.argmax(r.data[b, :n], axis=-1).tolist())
            res.alignments.append(al)
            per_utt.append(al.routes)
    else:
        res.utterance_routes = []
        for b, n in enumerate(lengths):
            k = utterance_route(r.data[b, :n].mean(axis=0))
            res.utterance_routes.append(k)
            per_utt.append([k] * int(n))
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in per_utt])


def forward_batch(model: Model, features: Sequence[np.ndarray]) -> ForwardResult:
    """Forward a list of [T_i, F] feature arrays as one padded batch."""
    cfg = model.config
    dtype = model.out_w.dtype
    padded, raw_lengths = pad_batch(features, dtype)
    x, lengths = subsample(Tensor(padded), model.frontend, raw_lengths)
    x = add_positions(x)
    bsz, t, d = x.shape
    mask = np.arange(t)[None, :] < lengths[:, None]
    valid = np.flatnonzero(mask.reshape(-1))
    res = ForwardResult(asr_log_probs=None, lengths=lengths)  # type: ignore[arg-type]
    routes = None
    balances = []
    for i, layer in enumerate(model.layers):
        if i == cfg.num_shared and model.router is not None:
            routes = _route(model, x, mask, lengths, res)
        if i not in model.moe:
            x = encoder_layer_forward(x, layer, mask, eps=cfg.ln_eps)
            continue
        moe = model.moe[i]

        def moe_ffn(y: Tensor, moe=moe) -> Tensor:
            rows = nx.gather_rows(nx.reshape(y, (bsz * t, d)), valid)
            if moe.gate is None:
                out = mle_dispatch(rows, routes, moe.experts)
            else:
                probs, top1 = smoe_gate(rows, moe.gate)
                bl, stats = balance_loss_tensor(probs, top1)
                balances.append(bl)
                res.gate_stats.append(stats)
                out = smoe_dispatch(rows, probs, top1, moe.experts)
            return nx.reshape(nx.scatter_rows([(out, valid)], bsz * t), (bsz, t, d))

        x = encoder_layer_forward(x, layer, mask, ffn=moe_ffn, eps=cfg.ln_eps)
    if model.router is not None and routes is None:
        _route(model, x, mask, lengths, res)
    res.asr_log_probs = nx.log_softmax(nx.linear(x, model.out_w, model.out_b))
    if balances:
        res.balance = nx.mul(nx.sum_all(nx.stack_scalars(balances)), 1.0 / len(balances))
    return res


@dataclass
class UtteranceOutput:
    asr_log_probs: np.ndarray  # [T', V]
    lid_logits: np.ndarray | None = None
    alignment: RoutingAlignment | None = None
    utterance_route: int | None = None
    gate_stats: list[BalanceStats] = field(default_factory=list)


def forward(model: Model, features: np.ndarray, mode: str = "infer") -> UtteranceOutput:
    """Single-utterance forward pass returning plain arrays."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    with nx.no_grad():
        res = forward_batch(model, [np.asarray(features)])
    n = int(res.lengths[0])
    return UtteranceOutput(
        asr_log_probs=res.asr_log_probs.data[0, :n],
        lid_logits=None if res.lid_logits is None else res.lid_logits.data[0, :n],
        alignment=None if res.alignments is None else res.alignments[0],
        utterance_route=None if res.utterance_routes is None else res.utterance_routes[0],
        gate_stats=res.gate_stats,
    )


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossBreakdown:
    asr: float
    lid: float
    balance: float
    total: float
    skipped: list[str] = field(default_factory=list)
    objective: Tensor | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"asr": self.asr, "lid": self.lid, "balance": self.balance, "total": self.total}


def _masked_mean(values: Tensor, keep: np.ndarray) -> Tensor:
    w = keep.astype(values.dtype) / max(int(keep.sum()), 1)
    return nx.sum_all(nx.mul_const(values, w))


def utterance_lid_target(lid_labels: Sequence[int]) -> int:
    """Majority language of an utterance's tokens (ties to the lowest id)."""
    counts = np.bincount(np.asarray(lid_labels, dtype=np.int64))
    counts[0] = 0
    return int(np.argmax(counts))


def training_loss(model: Model, batch: Sequence, lambda_lid: float | None = None) -> LossBreakdown:
    """Multi-task objective ``asr + lambda_lid * lid`` (+ weighted balance for sMoE).

    ``batch`` items need ``id``, ``features``, ``tokens`` and ``lid_labels``.
    Utterances whose labels cannot be aligned are dropped and listed in
    ``skipped``.
    """
    cfg = model.config
    lam = cfg.lambda_lid if lambda_lid is None else lambda_lid
    res = forward_batch(model, [u.features for u in batch])
    asr_nll, ok = ctc_loss_batch(res.asr_log_probs, res.lengths, [u.tokens for u in batch])
    lid_term = None
    if cfg.variant == "flr_moe":
        lid_lp = nx.log_softmax(res.lid_logits)
        lid_nll, ok_lid = ctc_loss_batch(lid_lp, res.lengths, [u.lid_labels for u in batch])
        ok = ok & ok_lid
        lid_term = _masked_mean(lid_nll, ok)
    skipped = [u.id for u, good in zip(batch, ok) if not good]
    asr = _masked_mean(asr_nll, ok)
    if cfg.variant == "ulr_moe":
        r = res.lid_logits
        bsz, t, c = r.shape
        mask = (np.arange(t)[None, :] < res.lengths[:, None]).astype(r.dtype)
        summed = nx.sum_axis(nx.mul_const(r, np.broadcast_to(mask[:, :, None], r.shape)), 1)
        pooled = nx.mul_const(summed, np.broadcast_to((1.0 / res.lengths)[:, None], (bsz, c)))
        targets = np.array([utterance_lid_target(u.lid_labels) for u in batch])
        ce = nx.neg(nx.pick(nx.log_softmax(pooled), targets))
        lid_term = _masked_mean(ce, ok)
    total = asr
    if lid_term is not None and lam:
        total = nx.add(total, nx.mul(lid_term, float(lam)))
    if res.balance is not None:
        total = nx.add(total, nx.mul(res.balance, float(cfg.balance_weight)))
    return LossBreakdown(
        asr=float(asr.data),
        lid=float(lid_term.data) if lid_term is not None else 0.0,
        balance=float(res.balance.data) if res.balance is not None else 0.0,
        total=float(total.data),
        skipped=skipped,
        objective=total,
    )


# ---------------------------------------------------------------------------
# cost accounting


def count_params(model_or_config) -> int:
    """Exact parameter count of a built model, or the closed form for a config."""
    if isinstance(model_or_config, Model):
        return int(sum(t.data.size for t in model_or_config.parameters()))
    return param_count(model_or_config)


def param_count(cfg: ModelConfig) -> int:
    cfg.validate()
    d, dff, K, V = cfg.d_model, cfg.d_ff, cfg.num_languages, cfg.vocab_size
    front = frontend_param_count(cfg.feat_dim, cfg.channels, d)
    dense_layer = attention_param_count(d) + 4 * d + ffn_param_count(d, dff)
    moe_base = attention_param_count(d) + 4 * d
    out = d * V + V
    if cfg.variant == "vallina":
        return front + cfg.num_layers * dense_layer + out
    n_moe = cfg.num_layers - cfg.num_shared
    if cfg.variant in LANGUAGE_ROUTED:
        return front + cfg.num_shared * dense_layer + n_moe * (moe_base + K * ffn_param_count(d, dff)) + d * (K + 1) + (K + 1) + out
    if cfg.variant == "smoe":
        n = cfg.smoe_experts
        return front + cfg.num_shared * dense_layer + n_moe * (moe_base + n * ffn_param_count(d, dff) + d * n + n) + out
    if cfg.variant == "lae":
        return front + (cfg.lae_shared + K * cfg.lae_specific) * dense_layer + out
    # multi/bi-encoder: K full encoders over a shared frontend, a gate mixing them
    k_enc = 2 if cfg.variant == "bi_encoder" else K
    return front + k_enc * cfg.num_layers * dense_layer + (k_enc * d * k_enc + k_enc) + out


@dataclass
class FlopBreakdown:
    frontend: float
    layers: float
    routing: float
    output: float

    @property
    def total(self) -> float:
        return self.frontend + self.layers + self.routing + self.output


def _frontend_flops(cfg: ModelConfig, frames: int) -> float:
    c, f1 = cfg.channels, freq_out_len(cfg.feat_dim)
    f2 = freq_out_len(f1)
    t1 = (frames + 1) // 2
    t2 = (t1 + 1) // 2
    conv1 = 2 * t1 * f1 * 9 * c + 2 * t1 * f1 * c  # MACs, bias, relu
    conv2 = 2 * t2 * f2 * 9 * c * c + 2 * t2 * f2 * c
    lin = 2 * t2 * c * f2 * cfg.d_model + t2 * cfg.d_model
    return conv1 + conv2 + lin + t2 * cfg.d_model  # + positions


def _attention_flops(cfg: ModelConfig, t: int) -> float:
    d, h = cfg.d_model, cfg.heads
    proj = 4 * (2 * t * d * d + t * d)
    scores = 2 * t * t * d + h * t * t  # QK^T and scaling
    soft = 5 * h * t * t
    ctx = 2 * t * t * d
    return proj + scores + soft + ctx + t * d + 8 * t * d  # residual + layer norm


def _ffn_flops(cfg: ModelConfig, t: int) -> float:
    d, dff = cfg.d_model, cfg.d_ff
    return 2 * t * d * dff + 2 * t * dff + 2 * t * dff * d + t * d + t * d + 8 * t * d


def flop_breakdown(model_or_config, input_seconds: float = 30.0, frame_rate: int = 100) -> FlopBreakdown:
    cfg = model_or_config.config if isinstance(model_or_config, Model) else model_or_config
    cfg.validate()
    frames = int(round(input_seconds * frame_rate))
    t = subsampled_length(frames)
    K, V, d = cfg.num_languages, cfg.vocab_size, cfg.d_model
    layer = _attention_flops(cfg, t) + _ffn_flops(cfg, t)
    front = _frontend_flops(cfg, frames)
    out = 2 * t * d * V + t * V + 5 * t * V
    routing = 0.0
    if cfg.variant in ("vallina", "ulr_moe", "flr_moe"):
        # one expert FFN per frame, so MLE layers cost what dense layers cost
        layers = cfg.num_layers * layer
        if cfg.variant != "vallina":
            routing = 2 * t * d * (K + 1) + t * (K + 1)
    elif cfg.variant == "smoe":
        n = cfg.smoe_experts
        n_moe = cfg.num_layers - cfg.num_shared
        layers = cfg.num_layers * layer + n_moe * t * d  # gate-probability scaling
        routing = n_moe * (2 * t * d * n + t * n + 5 * t * n)
    elif cfg.variant == "lae":
        layers = (cfg.lae_shared + K * cfg.lae_specific) * layer + (K - 1) * t * d  # frame-wise addition
    else:
        k_enc = 2 if cfg.variant == "bi_encoder" else K
        layers = k_enc * cfg.num_layers * layer
        routing = 2 * t * (k_enc * d) * k_enc + 5 * t * k_enc + 2 * k_enc * t * d  # gate + softmax + mixing
    return FlopBreakdown(front, layers, routing, out)


FLOPS_CONVENTION = (
    "forward pass, 100 input frames/s, multiply-accumulate = 2 FLOPs; biases, activations, residual adds, "
    "layer norm (8/elem) and softmax (5/elem) counted linearly; routed layers run one expert FFN per frame"
)


def count_flops(model_or_config, input_seconds: float = 30.0, frame_rate: int = 100) -> float:
    """Forward FLOPs for one input of ``input_seconds`` at ``frame_rate`` frames/s.

    Convention: a multiply-accumulate is 2 FLOPs; biases, activations,
    residual adds, layer norm (8/elem) and softmax (5/elem) count linearly.
    Language-routed layers count exactly one expert FFN per frame.
    """
    return flop_breakdown(model_or_config, input_seconds, frame_rate).total


def param_matched_dense(cfg: ModelConfig) -> ModelConfig:
    """A vallina config whose uniform FFN width gives the closest parameter
    count to ``cfg``."""
    target = param_count(cfg)
    base = replace(cfg, variant="vallina", num_shared=cfg.num_layers)

    def count(dff: int) -> int:
        return param_count(replace(base, d_ff=dff))

    per_unit = count(2) - count(1)
    guess = max(1, round(cfg.d_ff + (target - count(cfg.d_ff)) / per_unit))
    best = min(range(max(1, guess - 2), guess + 3), key=lambda dff: (abs(count(dff) - target), dff))
    return replace(base, d_ff=best)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (and optional extra named arrays) plus the config.

    Layout, little-endian: magic ``LRMOE001``; u32 record count; per record
    u16 name length, UTF-8 name, u8 rank, u32 dims, float32 data; then u32
    length and the UTF-8 JSON of the model config.
    """
    records = list(model.named_parameters().items())
    records += [(name, arr) for name, arr in (extra or {}).items()]
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(records))
    for name, t in records:
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(buf))


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    (blen,) = struct.unpack("<I", take(4))
    config = json.loads(take(blen).decode("utf-8"))
    return tensors, config


def load_checkpoint(path) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns it and any extra arrays."""
    tensors, cfg_dict = read_checkpoint(path)
    model = build(ModelConfig.from_dict(cfg_dict))
    params = model.named_parameters()
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    for name, t in params.items():
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, model expects {t.shape}")
        t.data = tensors[name].copy()
    extra = {k: v for k, v in tensors.items() if k not in params}
    return model, extra


def gflops_table(configs: dict[str, ModelConfig], input_seconds: float = 30.0) -> list[dict]:
    rows = []
    for label, cfg in configs.items():
        rows.append(
            {
                "model": label,
                "variant": cfg.variant,
                "params": param_count(cfg),
                "gflops": count_flops(cfg, input_seconds) / 1e9,
            }
        )
    return rows


__all__ = [
    "ANALYTIC_VARIANTS",
    "VARIANTS",
    "ConfigError",
    "ForwardResult",
    "LossBreakdown",
    "Model",
    "ModelConfig",
    "build",
    "count_flops",
    "count_params",
    "forward",
    "forward_batch",
    "load_checkpoint",
    "paper_config",
    "save_checkpoint",
    "training_loss",
]
