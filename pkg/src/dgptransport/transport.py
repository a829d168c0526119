"""Learned velocity fields, Euler transport of inducing values, and objectives.

All objectives return per-datum quantities: the data term is a minibatch
mean and every KL, surrogate or path term is divided by the training-set
size. Multiply a total by ``n_train`` to compare it with a log evidence.

Random numbers are consumed in a fixed order (base draws, divergence
probes, layer noise, then path pairs) so that objectives sharing a prefix
see identical draws from identical generator states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .bridge import bridge_sample, reference_drift
from .gp import dgp_forward, gaussian_kl, likelihood_nll, prior_logpdf
from .nn import MLP, Adam, Module

LOG_2PI = float(np.log(2.0 * np.pi))

_probe_calls = 0


def probe_count():
    """Number of stochastic trace probes issued since the last reset."""
    return _probe_calls


def reset_probe_count():
    global _probe_calls
    _probe_calls = 0


class IntegrationError(ArithmeticError):
    def __init__(self, step, msg="non-finite state"):
        super().__init__(f"Euler step {step}: {msg}")
        self.step = step


def time_features(s, S):
    """``[s, sin 2 pi s, cos 2 pi s]`` per row; ``s`` is a scalar or one time per row."""
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (S,))
    return np.stack([s, np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)], axis=1)


class VelocityField(Module):
    """SiLU net on ``[U, time features, ctx]`` returning a velocity shaped like ``U``.

    The last layer starts at zero so the field is identically zero at init.
    Without ``conditional`` the context input is omitted.
    """

    def __init__(self, M, d, rng, hidden=128, conditional=True):
        self.M, self.d, self.conditional = M, d, conditional
        width = M * d
        d_in = width + 3 + (width if conditional else 0)
        self.net = MLP(d_in, width, rng, hidden=hidden, depth=2, zero_last=True)

    def _inputs(self, U, s, ctx):
        U = dc.as_tensor(U)
        if U.ndim == 2:
            U = U.reshape(1, *U.shape)
        S = U.shape[0]
        if U.shape[1:] != (self.M, self.d):
            raise dc.DimensionError(f"VelocityField: U shape {U.shape} != (S, {self.M}, {self.d})")
        parts = [U.reshape(S, self.M * self.d), time_features(s, S)]
        if self.conditional:
            if ctx is None:
                raise dc.UsageError("conditional velocity field needs a context")
            c = dc.as_tensor(ctx).reshape(1, self.M * self.d)
            parts.append(dc.broadcast_to(c, (S, self.M * self.d)))
        return dc.concat(parts, axis=-1), S

    def __call__(self, U, s, ctx=None):
        x, S = self._inputs(U, s, ctx)
        return self.net(x).reshape(S, self.M, self.d)

    def jvp(self, U, s, ctx, dU):
        """Velocity and its directional derivative in ``U`` along ``dU``."""
        x, S = self._inputs(U, s, ctx)
        dU = np.asarray(dU, dtype=np.float64).reshape(S, self.M * self.d)
        dx = np.zeros(x.shape)
        dx[:, :self.M * self.d] = dU
        v, jv = self.net.jvp(x, dx)
        return v.reshape(S, self.M, self.d), jv.reshape(S, self.M, self.d)


class AffineField:
    """``v(U) = U A^T + b`` on flattened rows; a reference field with known divergence."""

    def __init__(self, A, b=None):
        self.A = dc.as_tensor(A)
        n = self.A.shape[0]
        self.b = dc.as_tensor(np.zeros(n) if b is None else b)

    def __call__(self, U, s=None, ctx=None):
        U = dc.as_tensor(U)
        shape = U.shape
        flat = U.reshape(-1, self.A.shape[0])
        return (flat @ self.A.T + self.b).reshape(shape)

    def jvp(self, U, s, ctx, dU):
        dU = dc.as_tensor(dU)
        shape = dU.shape
        return self(U, s, ctx), (dU.reshape(-1, self.A.shape[0]) @ self.A.T).reshape(shape)


def hutchinson_div(field, U, s, ctx, rng, return_velocity=False):
    """Single-probe estimate ``e^T (dv/dU) e`` with Rademacher ``e``, one per sample row."""
    global _probe_calls
    U = dc.as_tensor(U)
    eps = rng.integers(0, 2, size=U.shape) * 2.0 - 1.0
    _probe_calls += 1
    v, jv = field.jvp(U, s, ctx, eps)
    est = dc.sum((jv * eps).reshape(jv.shape[0], -1), axis=1)
    return (v, est) if return_velocity else est


def exact_div(field, U, s, ctx):
    """Full Jacobian trace, one directional derivative per coordinate."""
    U = dc.as_tensor(U)
    S = U.shape[0]
    k = int(np.prod(U.shape[1:]))
    total = 0.0
    for i in range(k):
        e = np.zeros((S, k))
        e[:, i] = 1.0
        _, jv = field.jvp(U, s, ctx, e.reshape(U.shape))
        total = total + jv.reshape(S, k)[:, i]
    return total


@dataclass
class Trajectory:
    states: list
    taus: np.ndarray
    pair: tuple | None = None
    logdet: object = None

    @property
    def end(self):
        return self.states[-1]


def euler_integrate(field, U0, ctx, N, rng=None, divergence=None):
    """Reverse-time Euler: ``U_{k+1} = U_k + v(U_k, 1 - k/N, ctx) / N``.

    ``divergence`` selects log-density tracking: ``"hutchinson"`` (needs
    ``rng``), ``"exact"`` or ``None``. The accumulated ``-sum div / N`` is
    returned as ``Trajectory.logdet``.
    """
    if int(N) < 1:
        raise ValueError(f"Euler step count must be >= 1, got {N}")
    N = int(N)
    U = dc.as_tensor(U0)
    states = [U]
    logdet = 0.0
    h = 1.0 / N
    for k in range(N):
        s = 1.0 - k * h
        try:
            if divergence == "hutchinson":
                v, div = hutchinson_div(field, U, s, ctx, rng, return_velocity=True)
                logdet = logdet - h * div
            elif divergence == "exact":
                v = field(U, s, ctx)
                logdet = logdet - h * exact_div(field, U, s, ctx)
            else:
                v = field(U, s, ctx)
            U = U + h * v
        except dc.NonFiniteError as exc:
            raise IntegrationError(k + 1) from exc
        if not np.all(np.isfinite(U.data)):
            raise IntegrationError(k + 1)
        states.append(U)
    return Trajectory(states, np.arange(N + 1) * h, logdet=logdet if divergence else None)


@dataclass
class LossBreakdown:
    total: dc.Tensor
    data_nll: float
    path_action: float = 0.0
    kl: float = 0.0
    logdet: float = 0.0
    alpha: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def value(self):
        return float(self.total.data)


def _f(t):
    return float(dc.as_tensor(t).data.sum()) if t is not None else 0.0


def beta_schedule(epoch, warm=20, start=1e-3):
    """Prior weight ramping log-linearly from ``start`` to 1 over ``warm`` epochs."""
    if epoch is None or epoch >= warm:
        return 1.0
    return float(start ** (1.0 - max(epoch, 0) / warm))


def sample_inducing(model, S, rng, N=None, divergence=None):
    """Draw ``S`` inducing-value sets per layer from the model's variational family.

    Flow families transport whitened values ``V`` (prior ``N(0, I)``) and
    return ``U = chol(K_ZZ) V``. Returns ``(U_list, info)`` where ``info``
    carries per-layer contexts, whitened endpoints and their log densities.
    """
    fam = model.family
    N = model.N if N is None else N
    U_list, ctxs, logq, V_list = [], [], [], []
    for i, layer in enumerate(model.layers):
        M, d = layer.M, layer.d_out
        eps = rng.standard_normal((S, M, d))
        if fam.kind == "gaussian":
            m, L = fam.mean[i], fam.chol_factor(i)
            Ve = L @ eps.transpose(0, 2, 1)[..., None]            # (S, d, M, 1)
            V = m + Ve.reshape(S, d, M).transpose(0, 2, 1)
            U_list.append(layer.chol() @ V)
            ctxs.append(None)
            logq.append(None)
            V_list.append(V)
            continue
        if fam.kind == "bridge":
            ctx = fam.amortisers[i](layer.Z)
            phi1, kap1, _, _ = model.sched.lookup(1.0)
            V0 = phi1 * ctx + np.sqrt(kap1) * eps
            logp0 = -0.5 * np.sum(eps ** 2, axis=(1, 2)) - 0.5 * M * d * (LOG_2PI + np.log(kap1))
        else:
            ctx = None
            V0 = dc.as_tensor(eps)
            logp0 = -0.5 * np.sum(eps ** 2, axis=(1, 2)) - 0.5 * M * d * LOG_2PI
        traj = euler_integrate(fam.fields[i], V0, ctx, N, rng=rng, divergence=divergence)
        U_list.append(layer.chol() @ traj.end)
        V_list.append(traj.end)
        ctxs.append(ctx)
        logq.append(None if divergence is None else logp0 + traj.logdet)
    return U_list, {"ctx": ctxs, "logq": logq, "V": V_list}


def std_normal_logpdf(V):
    V = dc.as_tensor(V)
    k = int(np.prod(V.shape[1:]))
    return -0.5 * dc.sum(dc.square(V).reshape(V.shape[0], k), axis=1) - 0.5 * k * LOG_2PI


def path_action_terms(model, ctxs, rng):
    """One ``(s_t, U_{s_t})`` pair per layer; ``0.5 ||v + v_ref||^2`` each."""
    terms, pairs = [], []
    N = model.N
    for i, ctx in enumerate(ctxs):
        s_t = max(float(rng.uniform()), 1.0 / N)
        U_s = bridge_sample(s_t, ctx, model.sched, rng)
        dv = model.family.fields[i](U_s, s_t, ctx) + reference_drift(U_s, s_t, ctx, model.sched)
        terms.append(0.5 * dc.sum(dc.square(dv)))
        pairs.append((s_t, U_s))
    return terms, pairs


def _data_term(model, x, U_list, rng, y):
    F = dgp_forward(x, U_list, model.layers, rng)
    return likelihood_nll(F, y, model.lik)


def om_loss(x, y, model, rng, alpha=None):
    alpha = model.alpha if alpha is None else alpha
    U_list, info = sample_inducing(model, model.mc_train, rng)
    nll = _data_term(model, x, U_list, rng, y)
    terms, pairs = path_action_terms(model, info["ctx"], rng)
    path = sum(terms[1:], terms[0])
    total = nll + (alpha / model.n_train) * path
    return LossBreakdown(total, _f(nll), path_action=_f(path), alpha=alpha,
                         extras={"pairs": [p[0] for p in pairs]})


def _cnf_parts(x, y, model, rng):
    U_list, info = sample_inducing(model, model.mc_train, rng, divergence="hutchinson")
    nll = _data_term(model, x, U_list, rng, y)
    kl, logdet = 0.0, 0.0
    # KL is invariant under the whitening map, so compare against N(0, I)
    for V, lq in zip(info["V"], info["logq"]):
        kl = kl + dc.mean(lq - std_normal_logpdf(V))
    for lq in info["logq"]:
        logdet = logdet + float(np.mean(lq.data))
    return nll, kl, logdet, info


def cnf_loss(x, y, model, rng):
    nll, kl, logdet, _ = _cnf_parts(x, y, model, rng)
    total = nll + kl / model.n_train
    return LossBreakdown(total, _f(nll), kl=_f(kl), logdet=logdet)


def cnfom_loss(x, y, model, rng, alpha=None):
    alpha = model.alpha if alpha is None else alpha
    nll, kl, logdet, info = _cnf_parts(x, y, model, rng)
    terms, _ = path_action_terms(model, info["ctx"], rng)
    path = sum(terms[1:], terms[0])
    total = nll + kl / model.n_train
    if alpha != 0.0:
        total = total + (alpha / model.n_train) * path
    return LossBreakdown(total, _f(nll), path_action=_f(path), kl=_f(kl), logdet=logdet, alpha=alpha)


def implicit_q_loss(x, y, model, epoch, rng):
    """Data NLL minus an annealed prior log density; the entropy of q is dropped."""
    beta = beta_schedule(epoch)
    U_list, _ = sample_inducing(model, model.mc_train, rng)
    nll = _data_term(model, x, U_list, rng, y)
    surrogate = 0.0
    for layer, U in zip(model.layers, U_list):
        surrogate = surrogate - beta * dc.mean(prior_logpdf(U, layer.chol()))
    total = nll + surrogate / model.n_train
    return LossBreakdown(total, _f(nll), kl=_f(surrogate), extras={"beta": beta})


def vanilla_fbvi_loss(x, y, model, rng, epoch=None):
    """Prior-based flow with the annealed implicit-q surrogate (beta=1 without an epoch)."""
    if model.family.kind != "prior":
        raise dc.UsageError("vanilla_fbvi_loss needs a prior-flow family")
    return implicit_q_loss(x, y, model, epoch, rng)


def dsvi_loss(x, y, model, rng):
    fam = model.family
    if fam.kind != "gaussian":
        raise dc.UsageError("dsvi_loss needs a Gaussian family")
    U_list, _ = sample_inducing(model, model.mc_train, rng)
    nll = _data_term(model, x, U_list, rng, y)
    kl = 0.0
    for i, layer in enumerate(model.layers):
        kl = kl + gaussian_kl(fam.mean[i], fam.chol_factor(i), None, chol=dc.tensor(np.eye(layer.M)))
    total = nll + kl / model.n_train
    return LossBreakdown(total, _f(nll), kl=_f(kl))


def objective_loss(model, x, y, rng, epoch=None):
    obj = model.objective
    if obj == "om":
        return om_loss(x, y, model, rng)
    if obj == "cnf":
        return cnf_loss(x, y, model, rng)
    if obj == "cnfom":
        return cnfom_loss(x, y, model, rng)
    if obj == "implicit_q":
        return implicit_q_loss(x, y, model, epoch, rng)
    if obj == "vanilla_fbvi":
        return vanilla_fbvi_loss(x, y, model, rng, epoch)
    if obj == "dsvi":
        return dsvi_loss(x, y, model, rng)
    raise ValueError(f"unknown objective {obj!r}")


def few_step_predict(model, x, steps, S, rng, return_moments=False):
    """Predictive draws with ``steps`` Euler steps, independent of the training count."""
    U_list, _ = sample_inducing(model, S, rng, N=steps)
    F, moments = dgp_forward(x, U_list, model.layers, rng, return_moments=True)
    return (F, moments) if return_moments else F


def path_residual(field, ctx, sched, N, n_eval, rng):
    """Mean ``||v + v_ref||^2 / dim`` over fresh bridge pairs with ``s ~ U[1/N, 1]``."""
    s = rng.uniform(1.0 / N, 1.0, n_eval)
    U = bridge_sample(s, ctx, sched, rng)
    dv = field(U, s, ctx) + reference_drift(U, s, ctx, sched)
    return float(np.mean(dv.data ** 2))


def fit_path_term(field, ctx, sched, N, steps, rng, pairs=64, lr=1e-3):
    """Train ``field`` on the path action alone (no data term), ``pairs`` draws per step.

    Times are drawn uniformly and clipped below at ``1/N`` as in training.
    Returns the per-step mean action.
    """
    params = field.parameters()
    opt = Adam(params, lr=lr)
    trace = []
    for _ in range(steps):
        s = np.maximum(rng.uniform(size=pairs), 1.0 / N)
        U = bridge_sample(s, ctx, sched, rng)
        dv = field(U, s, ctx) + reference_drift(U, s, ctx, sched)
        loss = 0.5 * dc.sum(dc.square(dv)) / pairs
        opt.step(dc.grad(loss, params))
        trace.append(float(loss.data))
    return trace
