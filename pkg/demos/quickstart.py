"""Quickstart: generate a small corpus, train an FLR-MoE model, evaluate it,
and look at how its router labels the frames of one code-switched utterance.

Runs in under a minute on one CPU core:

    python3 demos/quickstart.py
"""

from lrmoe.corpus import CorpusConfig, generate_corpus
from lrmoe.evaluation import evaluate, routing_report, routing_table
from lrmoe.models import ModelConfig, count_params
from lrmoe.training import TrainConfig, train

# Two languages with 8 tokens each. Token ids 1..8 belong to language 1 and
# 9..16 to language 2; id 0 is the CTC blank.
corpus_cfg = CorpusConfig(vocab_sizes=[8, 8], train_mono_per_language=150, train_cs=150,
                          eval_mono_per_language=30, eval_cs=30)
splits = generate_corpus(corpus_cfg)
train_set = splits.pop("train")
print(f"{len(train_set)} training utterances; eval splits: {sorted(splits)}")

# Two shared transformer layers, then two layers whose FFN is picked per frame
# by the language router that sits after the shared block.
model_cfg = ModelConfig(variant="flr_moe", num_layers=4, num_shared=2, d_model=32, heads=4, d_ff=64,
                        vocab_sizes=corpus_cfg.vocab_sizes, feat_dim=corpus_cfg.feat_dim)
print(f"FLR-MoE with {count_params(model_cfg):,} parameters")

result = train(model_cfg, TrainConfig(epochs=20, batch_size=16, warmup_steps=200), train_set)
first, last = result.history[0], result.history[-1]
print(f"loss {first['total']:.2f} -> {last['total']:.2f} over {last['step']} steps")

report = evaluate(result.model, splits, beam=4)
for split, ter in sorted(report.ter.items()):
    print(f"  TER {split:<12} {ter:6.2f}%")
print(f"  utterance LID accuracy from routing: {report.lid_accuracy:.1f}%")

# Per-frame routing for one code-switched utterance: the route column should
# change language roughly where the reference switches.
utt = splits["eval_cs"][0]
print(f"\nutterance {utt.id}: segments {utt.segment_spans}")
print(routing_table(routing_report(result.model, utt)))
