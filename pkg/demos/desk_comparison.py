"""The desk-scale comparison: FLR-MoE against ULR-MoE and a dense model with
the same parameter count, three seeds, three languages.

Takes about 11 minutes on one core. Pass a seed list to run fewer:

    python3 demos/desk_comparison.py 0
"""

import sys

from lrmoe.desk import run_desk


def show(r):
    print(f"seed {r.seed}  {r.variant:<8} {r.params:,} params  code-switch TER {r.cs_ter:6.2f}  "
          f"MER {r.report.mer:6.2f}  LID {r.report.lid_accuracy:5.1f}%  ({r.seconds:.0f}s)", flush=True)


seeds = tuple(int(s) for s in sys.argv[1:]) or (0, 1, 2)
results = run_desk(seeds=seeds, on_result=show)

by = {(r.variant, r.seed): r for r in results}
for s in seeds:
    flr, ulr, dense = (by[v, s] for v in ("flr_moe", "ulr_moe", "dense"))
    print(f"seed {s}: FLR beats dense: {flr.cs_ter < dense.cs_ter}; FLR MER <= ULR MER: {flr.report.mer <= ulr.report.mer}")
