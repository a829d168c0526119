"""
Thompson sampling on Hartmann-6
===============================

A reduced budget run: the deep GP surrogate picks each new point as the
argmin of one posterior draw over a random pool. Random search is the
reference.
"""

import numpy as np

from dgptransport.bo import BoConfig, bo_seeds

results = {}
for surrogate in ("random", "om"):
    cfg = BoConfig(function="hartmann6", surrogate=surrogate, n_init=20, n_iters=15)
    traces = bo_seeds(cfg, seeds=range(2))
    results[surrogate] = traces
    final = [t.regret[-1] for t in traces if not t.discarded]
    print(f"{surrogate:>6}: final regret {np.round(final, 3)}  mean {np.mean(final):.3f}")

###############################################################################
# Regret after every fifth evaluation for the first seed.

for name, traces in results.items():
    print(name, np.round(traces[0].regret[::5], 3))
