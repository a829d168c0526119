"""Paired significance tests, multiple-testing corrections and diagnostic probes."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from . import diffcore as dc

EXACT_MAX_N = 12


class DegenerateSampleError(ValueError):
    """Every paired difference is zero, or too few remain to test."""


@dataclass
class PairedSample:
    a: np.ndarray
    b: np.ndarray
    metric: str = "rmse"
    seeds: tuple | None = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise dc.DimensionError(f"paired samples differ in shape: {self.a.shape} vs {self.b.shape}")


@dataclass
class TestResult:
    statistic: float
    p: float
    n: int
    q_bh: float = float("nan")
    p_bonf: float = float("nan")
    exact: bool = True
    label: str = ""


def _ranks(absd):
    return sps.rankdata(absd, method="average")


def wilcoxon_one_sided(pairs: PairedSample, exact=None, min_n=5):
    """Signed-rank test of ``a < b``.

    The statistic is the rank sum of positive differences ``a - b``, so small
    values favour the alternative. Zero differences are dropped and tied
    magnitudes share average ranks. ``exact=None`` enumerates all sign
    patterns up to 12 pairs and uses the continuity-corrected normal
    approximation beyond that.
    """
    d = pairs.a - pairs.b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateSampleError("all paired differences are zero")
    if n < min_n:
        raise DegenerateSampleError(f"only {n} non-zero differences; need {min_n}")
    r = _ranks(np.abs(d))
    w = float(r[d > 0].sum())
    use_exact = n <= EXACT_MAX_N if exact is None else exact
    if use_exact:
        # all 2^n sign patterns; statistic distribution under the symmetric null
        signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        null = signs @ r
        p = float(np.mean(null <= w + 1e-9))
    else:
        mu = n * (n + 1) / 4.0
        _, counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
        z = (w - mu + 0.5) / math.sqrt(var)
        p = float(sps.norm.cdf(z))
    return TestResult(statistic=w, p=min(max(p, 0.0), 1.0), n=n, exact=use_exact)


def bh_adjust(pvals, m=None):
    """Benjamini-Hochberg step-up q-values in input order, capped at 1."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1:
        raise dc.DimensionError("bh_adjust expects a flat list of p-values")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p) if m is None else int(m)
    if m < len(p):
        raise ValueError(f"hypothesis count {m} is below the number of p-values {len(p)}")
    if len(p) == 0:
        return np.array([])
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, len(p) + 1)
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty_like(p)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def bonferroni(pvals, m=None):
    p = np.asarray(pvals, dtype=np.float64)
    m = len(p) if m is None else int(m)
    return np.minimum(p * m, 1.0)


def a2_noise_estimate(nll):
    """Noise variance implied by a Gaussian test NLL: ``exp(2 nll - 1) / (2 pi)``."""
    return np.exp(2.0 * np.asarray(nll, dtype=np.float64) - 1.0) / (2.0 * np.pi)


def grad_cov_probe(params, loss_fn, n_draws=200, seed=0):
    """Coefficient of variation of the full-gradient L2 norm over fresh draws.

    ``loss_fn(rng)`` must return a scalar tensor; parameters are not updated.
    """
    params = list(params)
    norms = np.empty(n_draws)
    seeds = np.random.SeedSequence(seed).spawn(n_draws)
    for i, ss in enumerate(seeds):
        loss = loss_fn(np.random.default_rng(ss))
        loss = getattr(loss, "total", loss)
        g = dc.grad(loss, params)
        norms[i] = math.sqrt(sum(float(np.sum(x * x)) for x in g))
    mean = norms.mean()
    if mean == 0 or np.all(norms == norms[0]):
        return 0.0
    return float(norms.std() / mean)


@dataclass
class RateStudy:
    steps: list
    errors: list
    slope: float
    exact: bool = False


def euler_rate_study(integrate, N_list=(5, 10, 20, 40, 80), reference_N=1000):
    """Log-log slope of the mean squared endpoint gap against a fine reference.

    ``integrate(N)`` returns the endpoint array for ``N`` Euler steps; it
    must reuse the same starting points on every call. All-zero gaps are
    reported as ``exact`` with slope ``nan``.
    """
    ref = np.asarray(integrate(reference_N))
    errs = []
    for N in N_list:
        gap = np.asarray(integrate(N)) - ref
        errs.append(float(np.mean(np.sum(gap.reshape(gap.shape[0], -1) ** 2, axis=1))))
    errs = np.array(errs)
    if np.all(errs <= 1e-28):
        return RateStudy(list(N_list), errs.tolist(), float("nan"), exact=True)
    slope = np.polyfit(np.log(np.asarray(N_list, dtype=float)), np.log(errs), 1)[0]
    return RateStudy(list(N_list), errs.tolist(), float(slope))


PLOT_FIELDS = ("method", "dataset", "seed", "step", "metric", "value")


def plot_rows(records, kind):
    """Long-format rows for ``kind`` in {final, training, fewstep, regret}."""
    rows = []
    for r in records:
        get = (lambda k, d=None: r.get(k, d)) if isinstance(r, dict) else (lambda k, d=None: getattr(r, k, d))
        method = get("objective", get("method"))
        dataset, seed = get("dataset"), get("seed")
        if kind == "final":
            for k, v in (get("metrics") or {}).items():
                rows.append((method, dataset, seed, "", k, v))
        elif kind == "training":
            for h in get("history") or []:
                for k, v in h.items():
                    if k != "epoch":
                        rows.append((method, dataset, seed, h["epoch"], k, v))
        elif kind == "fewstep":
            for steps, metrics in sorted((get("fewstep") or {}).items(), key=lambda kv: int(kv[0])):
                for k, v in metrics.items():
                    rows.append((method, dataset, seed, int(steps), k, v))
        elif kind == "regret":
            for i, v in enumerate(get("regret") or []):
                rows.append((method, dataset, seed, i, "regret", v))
        else:
            raise ValueError(f"unknown plot kind {kind!r}")
    return rows


def emit_plotdata(records, kind, path):
    rows = plot_rows(records, kind)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_FIELDS)
        for row in rows:
            w.writerow(row)
    return len(rows)


def read_plotdata(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [tuple(r) for r in reader]


def format_p(p):
    return f"{p:.3f}"
