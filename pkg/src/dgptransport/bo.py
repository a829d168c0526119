"""Thompson-sampling Bayesian optimisation on standard synthetic functions."""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .gp import dgp_forward
from .harness import TrainConfig, TrainingDiverged, make_dataset, model_for, train_step
from .nn import Adam
from .transport import sample_inducing


class DomainError(ValueError):
    """Input lies outside the function's standard domain."""


_H6_A = np.array([[10, 3, 17, 3.5, 1.7, 8],
                  [0.05, 10, 17, 0.1, 8, 14],
                  [3, 3.5, 1.7, 10, 17, 8],
                  [17, 8, 0.05, 10, 0.1, 14]], dtype=float)
_H6_P = 1e-4 * np.array([[1312, 1696, 5569, 124, 8283, 5886],
                         [2329, 4135, 8307, 3736, 1004, 9991],
                         [2348, 1451, 3522, 2883, 3047, 6650],
                         [4047, 8828, 8732, 5743, 1091, 381]], dtype=float)
_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_ARGMIN = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])


def hartmann6(x):
    x = np.atleast_2d(x)
    inner = np.sum(_H6_A * (x[:, None, :] - _H6_P) ** 2, axis=-1)
    return -np.sum(_H6_ALPHA * np.exp(-inner), axis=-1)


def levy(x):
    x = np.atleast_2d(x)
    w = 1 + (x - 1) / 4
    head = np.sin(np.pi * w[:, 0]) ** 2
    mid = np.sum((w[:, :-1] - 1) ** 2 * (1 + 10 * np.sin(np.pi * w[:, :-1] + 1) ** 2), axis=1)
    tail = (w[:, -1] - 1) ** 2 * (1 + np.sin(2 * np.pi * w[:, -1]) ** 2)
    return head + mid + tail


def ackley(x, a=20.0, b=0.2, c=2 * np.pi):
    x = np.atleast_2d(x)
    d = x.shape[1]
    s1 = np.sqrt(np.sum(x ** 2, axis=1) / d)
    s2 = np.sum(np.cos(c * x), axis=1) / d
    return -a * np.exp(-b * s1) - np.exp(s2) + a + np.e


def rosenbrock(x):
    x = np.atleast_2d(x)
    return np.sum(100 * (x[:, 1:] - x[:, :-1] ** 2) ** 2 + (1 - x[:, :-1]) ** 2, axis=1)


# name -> (function, default dim, (low, high), optimum value)
FUNCTIONS = {
    "hartmann6": (hartmann6, 6, (0.0, 1.0), -3.32237),
    "levy": (levy, 20, (-10.0, 10.0), 0.0),
    "ackley": (ackley, 50, (-32.768, 32.768), 0.0),
    "rosenbrock": (rosenbrock, 100, (-5.0, 10.0), 0.0),
}


def test_function(name, x):
    """Evaluate a named function on points in its native domain."""
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}; choose from {sorted(FUNCTIONS)}")
    f, dim, (lo, hi), _ = FUNCTIONS[name]
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    if name == "hartmann6" and X.shape[1] != 6:
        raise dc.DimensionError(f"hartmann6 is 6-dimensional, got {X.shape[1]}")
    if np.any(X < lo - 1e-12) or np.any(X > hi + 1e-12):
        raise DomainError(f"{name}: input outside [{lo}, {hi}]^d")
    out = f(X)
    return float(out[0]) if x.ndim == 1 else out


@dataclass
class BoConfig:
    function: str = "hartmann6"
    dim: int | None = None
    n_init: int = 20
    n_iters: int = 30
    pool_size: int = 500
    surrogate: str = "om"
    M: int = 32
    L: int = 2
    init_epochs: int = 200
    refit_epochs: int = 40
    lr: float = 1e-2
    hidden: int = 64
    seed: int = 0
    discard_window: int = 20

    def __post_init__(self):
        if self.surrogate == "om-path":
            self.surrogate = "om"
        if self.function not in FUNCTIONS:
            raise ValueError(f"unknown function {self.function!r}")
        if self.pool_size < 1 or self.n_init < 1 or self.n_iters < 0:
            raise ValueError("pool_size and n_init must be >= 1, n_iters >= 0")
        if self.surrogate not in ("om", "dsvi", "cnf", "cnfom", "implicit_q", "vanilla_fbvi", "random"):
            raise ValueError(f"unknown surrogate {self.surrogate!r}")

    @property
    def resolved_dim(self):
        return self.dim or FUNCTIONS[self.function][1]

    @classmethod
    def full_budget(cls, **kw):
        base = dict(n_init=50, n_iters=100, pool_size=1000, M=64, refit_epochs=80)
        base.update(kw)
        return cls(**base)


@dataclass
class BoTrace:
    function: str
    surrogate: str
    seed: int
    best: list = field(default_factory=list)
    regret: list = field(default_factory=list)
    discarded: bool = False
    reason: str = ""
    x_best: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class DgpSurrogate:
    """Trained DGP on unit-cube inputs with standardised targets, warm-started across refits."""

    def __init__(self, config: BoConfig):
        self.cfg = config
        self.model = None
        self.opt = None
        self.y_mean, self.y_std = 0.0, 1.0

    def _train_config(self):
        c = self.cfg
        return TrainConfig(objective=c.surrogate, L=c.L, M=c.M, lr=c.lr, hidden=c.hidden,
                           batch=256, seed=c.seed, mc_eval=8, width=None)

    def fit(self, X, y):
        ds = make_dataset(X, y, seed=self.cfg.seed, test_frac=0.0)
        # keep inputs on the unit cube; only targets are standardised
        ds.X_train, ds.x_mean, ds.x_std = np.asarray(X, dtype=float), np.zeros(X.shape[1]), np.ones(X.shape[1])
        self.y_mean, self.y_std = ds.y_mean, ds.y_std
        tc = self._train_config()
        first = self.model is None
        if first:
            self.model = model_for(tc, ds)
            self.opt = Adam(self.model.parameters(), lr=tc.lr)
        self.model.n_train = ds.n_train
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, ds.n_train]))
        for epoch in range(self.cfg.init_epochs if first else self.cfg.refit_epochs):
            perm = rng.permutation(ds.n_train)
            for step, start in enumerate(range(0, ds.n_train, tc.batch)):
                idx = perm[start:start + tc.batch]
                train_step(self.model, self.opt, tc, ds.X_train[idx], ds.y_train[idx], rng, epoch, step)

    def sample_function(self, X, rng):
        """One coherent posterior function evaluated on ``X`` (standardised units)."""
        U_list, _ = sample_inducing(self.model, 1, rng)
        F = dgp_forward(X, [u.detach() for u in U_list], self.model.layers, rng, sample=False)
        return F.data[0, :, 0]


def thompson_step(surrogate, pool, rng):
    """Index of the argmin of one posterior draw over ``pool`` (lowest index on ties)."""
    pool = np.atleast_2d(pool)
    if len(pool) == 1:
        return 0
    vals = np.asarray(surrogate.sample_function(pool, rng))
    return int(np.argmin(vals))


def bo_run(config: BoConfig):
    """Initial uniform design, then Thompson (or random) picks from fresh uniform pools.

    A surrogate failure (Cholesky or divergence) discards the seed and is
    recorded on the trace.
    """
    f, _, (lo, hi), fstar = FUNCTIONS[config.function]
    dim = config.resolved_dim
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    X = rng.uniform(0, 1, (config.n_init, dim))
    y = f(lo + (hi - lo) * X)
    trace = BoTrace(config.function, config.surrogate, config.seed)

    def record():
        i = int(np.argmin(y))
        trace.best.append(float(y[i]))
        trace.regret.append(float(y[i] - fstar))
        trace.x_best = (lo + (hi - lo) * X[i]).tolist()

    record()
    surrogate = None if config.surrogate == "random" else DgpSurrogate(config)
    for it in range(config.n_iters):
        if surrogate is None:
            x_new = rng.uniform(0, 1, (1, dim))
        else:
            pool = rng.uniform(0, 1, (config.pool_size, dim))
            try:
                surrogate.fit(X, y)
                x_new = pool[thompson_step(surrogate, pool, rng)][None, :]
            except (dc.DecompositionError, TrainingDiverged, dc.NonFiniteError) as exc:
                trace.discarded = True
                window = "within" if it < config.discard_window else "after"
                trace.reason = f"iteration {it} ({window} the first {config.discard_window}): {exc}"
                return trace
        X = np.vstack([X, x_new])
        y = np.append(y, f(lo + (hi - lo) * x_new))
        record()
    return trace


def bo_seeds(config: BoConfig, seeds, workers=1):
    configs = [dataclasses.replace(config, seed=s) for s in seeds]
    if workers <= 1:
        return [bo_run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(bo_run, configs))
