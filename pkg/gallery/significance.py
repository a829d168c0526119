"""
Paired tests across seeds
=========================

Compare two methods on several datasets with one-sided signed-rank tests,
then adjust the p-values for the number of comparisons.
"""

import numpy as np

from dgptransport.analysis import PairedSample, bh_adjust, bonferroni, wilcoxon_one_sided

rng = np.random.default_rng(0)
shifts = {"alpha": 0.0, "beta": 0.05, "gamma": 0.2, "delta": 0.5}

names, pvals = [], []
for name, shift in shifts.items():
    b = rng.normal(1.0, 0.1, 10)
    a = b - shift * 0.1 + rng.normal(0, 0.03, 10)
    res = wilcoxon_one_sided(PairedSample(a, b))
    names.append(name)
    pvals.append(res.p)

q = bh_adjust(pvals)
pb = bonferroni(pvals)
print("dataset    p      q_bh   p_bonf")
for row in zip(names, pvals, q, pb):
    print("{:<8} {:.3f}  {:.3f}  {:.3f}".format(*row))
