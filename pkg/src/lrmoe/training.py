"""Optimization: inverse-sqrt warmup schedule, Adam, clipping, the epoch loop,
and shared-block pretraining with weight transfer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .models import LossBreakdown, Model, ModelConfig, build, load_checkpoint, save_checkpoint, training_loss
from .numerics import Tensor

log = logging.getLogger(__name__)


class TransferError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr_scale: float = 1.0
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    lambda_lid: float = 0.3
    grad_clip_norm: float = 5.0
    seed: int = 0
    pretrain: str | None = None  # vallina checkpoint for the shared block
    pretrain_epochs: int = 0  # >0: train that checkpoint first on the same corpus
    freeze_shared: bool = False
    max_steps: int | None = None

    def validate(self) -> "TrainConfig":
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps: must be >= 1")
        if self.lambda_lid < 0:
            raise ValueError("lambda_lid: must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size/epochs: must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown train config key")
        return cls(**d)


def lr_schedule(step: int, d: int, scale: float = 1.0, warmup: int = 25000) -> float:
    """``scale * d**-0.5 * min(step**-0.5, step * warmup**-1.5)``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
    frozen: set[str] | None = None,
) -> None:
    """In-place bias-corrected Adam update from each parameter's ``grad``.

    Parameters without a gradient are treated as having a zero gradient. A
    non-finite gradient aborts the whole step before anything is modified.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, p in params.items():
        if frozen and name in frozen:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients by one factor so their global norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# shared-block transfer


def transfer_shared(source: Model, target: Model) -> Model:
    """Copy the frontend and first N layers of ``source`` into ``target``.

    Experts, gates, router and the upper layers of ``target`` keep their own
    initialization. All shapes are checked before anything is written.
    """
    src = source.named_parameters()
    dst = target.named_parameters()
    names = target.shared_parameter_names()
    bad = []
    for name in names:
        if name not in src:
            bad.append(f"{name} (missing in source)")
        elif src[name].shape != dst[name].shape:
            bad.append(f"{name} {src[name].shape} vs {dst[name].shape}")
    if bad:
        raise TransferError("incompatible tensors: " + ", ".join(bad))
    for name in names:
        dst[name].data = src[name].data.astype(dst[name].dtype, copy=True)
    return target


def pretrain_config(model_cfg: ModelConfig) -> ModelConfig:
    """Vallina model with the target's depth and dims."""
    return replace(model_cfg, variant="vallina", num_shared=model_cfg.num_layers)


def pretrain_shared(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus, out_path=None) -> Model:
    """Train a vallina model whose lower layers seed the shared block."""
    cfg = replace(train_cfg, epochs=train_cfg.pretrain_epochs or train_cfg.epochs, pretrain=None, pretrain_epochs=0)
    result = train(pretrain_config(model_cfg), cfg, corpus)
    if out_path is not None:
        save_checkpoint(out_path, result.model)
    return result.model


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    state: AdamState
    skipped: list[str]


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _save_state(path, model: Model, state: AdamState) -> None:
    extra = {f"optim.m.{k}": v for k, v in state.m.items()}
    extra.update({f"optim.v.{k}": v for k, v in state.v.items()})
    extra["optim.step"] = np.array([state.step], dtype=np.float32)
    save_checkpoint(path, model, extra)


def load_training_state(path) -> tuple[Model, AdamState]:
    model, extra = load_checkpoint(path)
    state = AdamState(step=int(extra.pop("optim.step", np.zeros(1))[0]))
    for key, arr in extra.items():
        if key.startswith("optim.m."):
            state.m[key[len("optim.m.") :]] = arr.copy()
        elif key.startswith("optim.v."):
            state.v[key[len("optim.v.") :]] = arr.copy()
    return model, state


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Sequence,
    out_dir=None,
    resume: str | None = None,
    model: Model | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize the multi-task objective over ``corpus``.

    Batches are drawn from a fixed per-epoch permutation, so a run is a pure
    function of the configs and the corpus. With ``out_dir`` the per-step
    metrics go to ``metrics.jsonl`` and the final model plus optimizer state
    to ``model.ckpt``. ``resume`` continues from such a checkpoint.
    """
    train_cfg.validate()
    if not corpus:
        raise DataError("corpus is empty")
    state = AdamState()
    if resume is not None:
        model, state = load_training_state(resume)
    elif model is None:
        model = build(model_cfg)
        if train_cfg.pretrain or train_cfg.pretrain_epochs:
            if train_cfg.pretrain:
                source, _ = load_checkpoint(train_cfg.pretrain)
            else:
                source = pretrain_shared(model_cfg, train_cfg, corpus)
            transfer_shared(source, model)
    params = model.named_parameters()
    frozen = set(model.shared_parameter_names()) if train_cfg.freeze_shared else None
    d = model.config.d_model

    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if resume else "w", encoding="utf-8")

    history: list[dict] = []
    skipped: list[str] = []
    steps_per_epoch = math.ceil(len(corpus) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)
    feasible_seen = False
    try:
        step = state.step
        while step < total_steps:
            epoch, pos = divmod(step, steps_per_epoch)
            idx = batch_order(len(corpus), train_cfg.batch_size, train_cfg.seed, epoch)[pos]
            batch = [corpus[i] for i in idx]
            model.zero_grad()
            lb: LossBreakdown = training_loss(model, batch, lambda_lid=train_cfg.lambda_lid)
            skipped += lb.skipped
            if len(lb.skipped) < len(batch):
                feasible_seen = True
                nx.backward(lb.objective)
            norm = clip_grad_norm(list(params.values()), train_cfg.grad_clip_norm)
            lr = lr_schedule(state.step + 1, d, train_cfg.lr_scale, train_cfg.warmup_steps)
            adam_step(params, state, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, frozen)
            step = state.step
            rec = {"step": step, "epoch": epoch, "lr": lr, **lb.as_dict(), "grad_norm": norm}
            history.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if step % steps_per_epoch == 0:
                tail = history[-steps_per_epoch:]
                log.info("epoch %d done: mean total %.4f", epoch + 1, np.mean([r["total"] for r in tail]))
        if total_steps and not feasible_seen and not resume:
            raise DataError("no utterance in the corpus admits a CTC alignment")
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        _save_state(out_dir / "model.ckpt", model, state)
    return TrainResult(model, history, state, skipped)
