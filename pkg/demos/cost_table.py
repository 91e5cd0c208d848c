"""Parameter and compute accounting at full size.

Shows that routing by language adds parameters (one FFN per language in the
upper layers) without adding per-frame compute, while the language-specific
encoder baselines pay in both.

    python3 demos/cost_table.py
"""

from dataclasses import replace

from lrmoe.models import count_flops, count_params, paper_config

print("FLR-MoE vs vallina as the language count grows (30 s of input):")
print(f"{'K':>3} {'vallina M':>10} {'FLR-MoE M':>10} {'vallina GF':>11} {'FLR-MoE GF':>11}")
for k in (2, 4, 8, 16):
    flr = paper_config("flr_moe", k)
    dense = replace(flr, variant="vallina", num_shared=flr.num_layers)
    print(f"{k:>3} {count_params(dense) / 1e6:>10.2f} {count_params(flr) / 1e6:>10.2f} "
          f"{count_flops(dense) / 1e9:>11.2f} {count_flops(flr) / 1e9:>11.2f}")

# Each extra language adds (L - N) expert FFNs plus one router row.
flr2, flr3 = paper_config("flr_moe", 2, vocab=12064), paper_config("flr_moe", 3, vocab=12064)
print(f"\none more language adds {count_params(flr3) - count_params(flr2):,} parameters")

print("\nFour-language baselines relative to vallina:")
base = count_flops(paper_config("vallina", 4))
for v in ("vallina", "smoe", "ulr_moe", "flr_moe", "lae", "multi_encoder"):
    c = paper_config(v, 4)
    print(f"  {v:<14} {count_params(c) / 1e6:6.2f}M params  {count_flops(c) / 1e9:7.2f} GFLOPs  x{count_flops(c) / base:.3f}")
