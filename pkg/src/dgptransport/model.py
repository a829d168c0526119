"""Deep GP model container and its three variational families."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .bridge import Amortiser, BridgeParams, solve_doob
from .diffcore import Tensor
from .gp import Likelihood, build_layers
from .nn import Module
from .transport import VelocityField

OBJECTIVES = ("om", "cnf", "cnfom", "implicit_q", "vanilla_fbvi", "dsvi")
FAMILY_OF = {"om": "bridge", "cnf": "bridge", "cnfom": "bridge", "implicit_q": "bridge",
             "vanilla_fbvi": "prior", "dsvi": "gaussian"}


class BridgeFamily(Module):
    """Per layer: an amortised anchor mean and a context-conditioned velocity field."""

    kind = "bridge"

    def __init__(self, layers, rng, hidden=128):
        self.amortisers = [Amortiser(l.d_in, l.d_out, rng, hidden=hidden) for l in layers]
        self.fields = [VelocityField(l.M, l.d_out, rng, hidden=hidden) for l in layers]


class PriorFlowFamily(Module):
    """Per layer: an unconditional velocity field started from the GP prior."""

    kind = "prior"

    def __init__(self, layers, rng, hidden=128):
        self.fields = [VelocityField(l.M, l.d_out, rng, hidden=hidden, conditional=False)
                       for l in layers]


class GaussianFamily(Module):
    """Per layer and output column: whitened ``V ~ N(m, L L^T)`` with ``U = chol(K_ZZ) V``.

    Inner layers start nearly deterministic, the last one at the prior.
    """

    kind = "gaussian"

    def __init__(self, layers, inner_scale=1e-2):
        self.mean, self.raw, self.log_diag = [], [], []
        for i, l in enumerate(layers):
            M, d = l.M, l.d_out
            scale = 1.0 if i == len(layers) - 1 else inner_scale
            self.mean.append(Tensor(np.zeros((M, d)), requires_grad=True))
            self.raw.append(Tensor(np.zeros((d, M, M)), requires_grad=True))
            self.log_diag.append(Tensor(np.full((d, M), np.log(scale)), requires_grad=True))
        self._masks = [np.tril(np.ones((l.M, l.M)), -1) for l in layers]

    def chol_factor(self, i):
        eye = np.eye(self.raw[i].shape[-1])
        d, M = self.log_diag[i].shape
        return self.raw[i] * self._masks[i] + dc.exp(self.log_diag[i]).reshape(d, M, 1) * eye


class DgpModel(Module):
    """GP layers, a likelihood head and a variational family.

    ``n_train`` scales the per-datum objectives; ``N`` is the training
    Euler step count.
    """

    def __init__(self, layers, lik, family, objective, sched=None, N=10, alpha=1.0,
                 n_train=1, mc_train=2):
        if objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}")
        if FAMILY_OF[objective] != family.kind:
            raise ValueError(f"objective {objective!r} needs a {FAMILY_OF[objective]} family")
        self.layers = list(layers)
        self.lik = lik
        self.family = family
        self.objective = objective
        self.sched = sched
        self.N = int(N)
        self.alpha = float(alpha)
        self.n_train = int(n_train)
        self.mc_train = int(mc_train)


def build_model(X, objective="om", L=2, M=128, N=10, alpha=1.0, bridge=None, width=None,
                hidden=128, likelihood="gaussian", noise_var=0.1, mc_train=2, seed=0):
    """Model for training inputs ``X``; all random initialisation flows from ``seed``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise dc.DimensionError(f"build_model: X must be 2-D, got {X.shape}")
    if L < 1 or M < 1 or N < 1:
        raise ValueError("L, M and N must be positive")
    rng = np.random.default_rng(seed)
    w = width if width is not None else min(X.shape[1], 8)
    layers = build_layers(X, [w] * (L - 1), min(M, len(X)) if len(X) >= 1 else M, rng)
    kind = FAMILY_OF.get(objective)
    if kind is None:
        raise ValueError(f"unknown objective {objective!r}")
    if kind == "bridge":
        family = BridgeFamily(layers, rng, hidden)
    elif kind == "prior":
        family = PriorFlowFamily(layers, rng, hidden)
    else:
        family = GaussianFamily(layers)
    sched = solve_doob(bridge or BridgeParams())
    return DgpModel(layers, Likelihood(likelihood, noise_var), family, objective,
                    sched=sched, N=N, alpha=alpha, n_train=len(X), mc_train=mc_train)
