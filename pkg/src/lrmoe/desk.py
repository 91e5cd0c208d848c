"""Desk-scale setup: K=3 languages, d=64, L=4, N=2, about 2,000 training
utterances, and the FLR / ULR / parameter-matched dense comparison."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

from .corpus import CorpusConfig, generate_corpus
from .evaluation import EvalReport, evaluate
from .models import ModelConfig, count_params, param_matched_dense
from .training import TrainConfig, train

log = logging.getLogger(__name__)

DESK_EPOCHS = 10


def desk_corpus_config(seed: int = 0) -> CorpusConfig:
    return CorpusConfig(seed=seed)


def desk_model_config(variant: str = "flr_moe", seed: int = 0) -> ModelConfig:
    base = ModelConfig(
        variant="flr_moe",
        num_layers=4,
        num_shared=2,
        d_model=64,
        heads=4,
        d_ff=128,
        vocab_sizes=[10, 10, 10],
        feat_dim=16,
        seed=seed,
    )
    if variant == "dense":
        return param_matched_dense(base)
    if variant == "vallina":
        return replace(base, variant="vallina", num_shared=base.num_layers)
    return replace(base, variant=variant)


def desk_train_config(seed: int = 0, epochs: int = DESK_EPOCHS) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=16, warmup_steps=500, seed=seed)


@dataclass
class RunResult:
    variant: str
    seed: int
    params: int
    report: EvalReport
    seconds: float

    @property
    def cs_ter(self) -> float:
        return self.report.ter["eval_cs"]


def run_desk(variants=("flr_moe", "ulr_moe", "dense"), seeds=(0, 1, 2), epochs: int = DESK_EPOCHS, beam: int = 1,
             corpus_seed: int = 0, on_result=None) -> list[RunResult]:
    """Train and evaluate every variant for every seed on one fixed corpus.

    The seed drives model initialization and batch order.
    """
    splits = generate_corpus(desk_corpus_config(corpus_seed))
    train_set = splits.pop("train")
    results = []
    for seed in seeds:
        for variant in variants:
            mcfg = desk_model_config(variant, seed)
            t0 = time.perf_counter()
            model = train(mcfg, desk_train_config(seed, epochs), train_set).model
            report = evaluate(model, splits, beam=beam)
            res = RunResult(variant, seed, count_params(mcfg), report, time.perf_counter() - t0)
            log.info("%s seed %d: cs TER %.2f, LID %.1f%%", variant, seed, res.cs_ter, report.lid_accuracy)
            results.append(res)
            if on_result:
                on_result(res)
    return results
