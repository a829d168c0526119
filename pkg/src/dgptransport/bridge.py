"""Gaussian bridge marginals for an OU forward process and their flow drift.

The forward process ``dU = -lam U ds + g dW`` is conditioned on a Gaussian
anchor ``N(ctx, sigma0^2 I)`` at ``s = 0``. Its marginals stay Gaussian,
``N(phi(s) ctx, kappa(s) I)``, with scalar coefficients obtained from two
linear ODEs. The deterministic drift that transports those marginals is
affine in ``U`` and available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .nn import MLP, Module

S_MIN = 1e-3


class BridgeError(ArithmeticError):
    """Invalid bridge parameters or a query outside the schedule."""


@dataclass(frozen=True)
class BridgeParams:
    lam: float = 1.0
    g: float = 1.0
    sigma0: float = 1.0
    grid_n: int = 100
    s_min: float = S_MIN

    def __post_init__(self):
        if not (self.lam > 0 and self.g > 0 and self.sigma0 > 0):
            raise ValueError(f"bridge parameters must be positive: {self}")
        if self.grid_n < 50:
            raise ValueError(f"grid_n must be >= 50, got {self.grid_n}")
        if not 0 < self.s_min < 1:
            raise ValueError(f"s_min must lie in (0, 1), got {self.s_min}")


def c_correction(s, p: BridgeParams):
    """Anchor-pull rate ``g^2 sigma0^2 a^2 / ((a^2 sigma0^2 + q) q)``; blows up like ``1/s``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise BridgeError("c_correction: bridge time must be positive")
    a2 = np.exp(-2.0 * p.lam * s)
    q = p.g ** 2 * -np.expm1(-2.0 * p.lam * s) / (2.0 * p.lam)
    out = p.g ** 2 * p.sigma0 ** 2 * a2 / ((a2 * p.sigma0 ** 2 + q) * q)
    return out if out.ndim else float(out)


def _rhs(s, y, p: BridgeParams):
    phi, kappa = y
    a = np.exp(-p.lam * s)
    c = c_correction(s, p)
    dphi = -(p.lam + c) * phi + c * a
    dkappa = -2.0 * (p.lam + c) * kappa + p.g ** 2 + 2.0 * c * a * p.sigma0 ** 2
    return np.array([dphi, dkappa])


@dataclass(frozen=True)
class DoobSchedule:
    params: BridgeParams
    s_grid: np.ndarray
    phi: np.ndarray
    kappa: np.ndarray
    phi_dot: np.ndarray
    kappa_dot: np.ndarray

    @property
    def s_min(self):
        return float(self.s_grid[0])

    def lookup(self, s, clamp=False):
        """Linearly interpolated ``(phi, kappa, phi_dot, kappa_dot)`` at ``s``.

        Scalars give floats, arrays give arrays of the same shape.
        """
        arr = np.asarray(s, dtype=np.float64)
        lo, hi = self.s_grid[0], self.s_grid[-1]
        if not clamp and (np.any(arr < lo - 1e-12) or np.any(arr > hi + 1e-12)):
            raise BridgeError(f"s outside schedule range [{lo:g}, {hi:g}]")
        arr = np.clip(arr, lo, hi)
        vals = tuple(np.interp(arr, self.s_grid, a)
                     for a in (self.phi, self.kappa, self.phi_dot, self.kappa_dot))
        return tuple(float(v) for v in vals) if arr.ndim == 0 else vals

    def to_rows(self):
        return np.column_stack([self.s_grid, self.phi, self.kappa, self.phi_dot, self.kappa_dot])


def solve_doob(p: BridgeParams | None = None) -> DoobSchedule:
    """RK4 on a uniform grid from ``s_min`` (anchored at ``phi=1, kappa=sigma0^2``) to 1."""
    p = p or BridgeParams()
    s = np.linspace(p.s_min, 1.0, p.grid_n)
    Y = np.empty((p.grid_n, 2))
    Y[0] = (1.0, p.sigma0 ** 2)
    for i in range(p.grid_n - 1):
        h, t, y = s[i + 1] - s[i], s[i], Y[i]
        k1 = _rhs(t, y, p)
        k2 = _rhs(t + h / 2, y + h / 2 * k1, p)
        k3 = _rhs(t + h / 2, y + h / 2 * k2, p)
        k4 = _rhs(t + h, y + h * k3, p)
        Y[i + 1] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not Y[i + 1, 1] > 0:
            raise BridgeError(f"kappa left the positive half-line at s={s[i + 1]:g}")
    D = np.array([_rhs(t, y, p) for t, y in zip(s, Y)])
    return DoobSchedule(p, s, Y[:, 0].copy(), Y[:, 1].copy(), D[:, 0].copy(), D[:, 1].copy())


def schedule_lookup(sched: DoobSchedule, s, clamp=False):
    return sched.lookup(s, clamp=clamp)


def _per_sample(coef, ndim):
    # scalar coefficients pass through; per-sample ones broadcast over (S, M, d)
    return coef if np.ndim(coef) == 0 else np.reshape(coef, (-1,) + (1,) * (ndim - 1))


def bridge_sample(s, ctx, sched: DoobSchedule, rng, eps=None, clamp=False):
    """Reparameterised draw ``phi(s) ctx + sqrt(kappa(s)) eps``.

    An array of times gives one draw per time, stacked on a leading axis.
    """
    phi, kappa, _, _ = sched.lookup(s, clamp=clamp)
    ctx = dc.as_tensor(ctx)
    shape = ctx.shape if np.ndim(s) == 0 else (len(s),) + ctx.shape
    if eps is None:
        eps = rng.standard_normal(shape)
    nd = len(shape)
    return _per_sample(phi, nd) * ctx + np.sqrt(_per_sample(kappa, nd)) * np.asarray(eps)


def reference_drift(U, s, ctx, sched: DoobSchedule, clamp=False):
    """Forward-time drift ``phi' ctx + kappa'/(2 kappa) (U - phi ctx)``.

    The reverse-time sampler is anchored to the negation of this field.
    ``s`` may be an array with one time per leading row of ``U``.
    """
    phi, kappa, dphi, dkappa = sched.lookup(s, clamp=clamp)
    ctx = dc.as_tensor(ctx)
    nd = max(dc.as_tensor(U).ndim, ctx.ndim + 1)
    phi, dphi = _per_sample(phi, nd), _per_sample(dphi, nd)
    rate = _per_sample(np.asarray(dkappa) / (2.0 * np.asarray(kappa)), nd)
    return dphi * ctx + rate * (U - phi * ctx)


class Amortiser(Module):
    """Row-wise SiLU net mapping inducing inputs to the bridge anchor mean."""

    def __init__(self, d_in, d_out, rng, hidden=128, depth=2):
        self.d_out = d_out
        self.net = MLP(d_in, d_out, rng, hidden=hidden, depth=depth, zero_last=True)

    def __call__(self, Z):
        return self.net(Z)
