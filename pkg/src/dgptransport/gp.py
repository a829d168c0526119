"""Sparse-GP layers with an ARD-RBF kernel, stacked into a deep GP.

Inducing values ``U`` live in function space (unwhitened) with prior
``N(0, K_ZZ)`` per output column. Conditionals keep only the per-point
marginal variance, as in doubly-stochastic inference.
"""

from __future__ import annotations

import numpy as np
from scipy.cluster.vq import kmeans2

from . import diffcore as dc
from .diffcore import Tensor
from .nn import Module

LOG_2PI = float(np.log(2.0 * np.pi))


class KernelParams(Module):
    def __init__(self, d, lengthscale=1.0, amplitude=1.0):
        self.log_lengthscales = Tensor(np.full(d, np.log(lengthscale)), requires_grad=True)
        self.log_amplitude = Tensor(np.log(amplitude), requires_grad=True)

    @property
    def variance(self):
        return dc.exp(2.0 * self.log_amplitude)


def ard_rbf(X, X2, params: KernelParams):
    """``sigma_k^2 exp(-0.5 sum_d (x_d - x'_d)^2 / l_d^2)`` between row sets."""
    X, X2 = dc.as_tensor(X), dc.as_tensor(X2)
    d = params.log_lengthscales.shape[0]
    if X.ndim != 2 or X2.ndim != 2 or X.shape[1] != d or X2.shape[1] != d:
        raise dc.DimensionError(
            f"ard_rbf: inputs {X.shape}, {X2.shape} do not match {d} lengthscales"
        )
    inv_ls = dc.exp(-params.log_lengthscales)
    A, B = X * inv_ls, X2 * inv_ls
    # expanded form avoids an n x m x d intermediate; clamp the rounding below 0
    sa = dc.sum(dc.square(A), axis=1).reshape(-1, 1)
    sb = dc.sum(dc.square(B), axis=1).reshape(1, -1)
    sq = dc.clip_min(sa + sb - 2.0 * (A @ B.T), 0.0)
    return params.variance * dc.exp(-0.5 * sq)


def linear_mean_map(d_in, d_out, X=None):
    """Fixed skip-connection weights (``d_in x d_out``).

    Identity when widths agree. When shrinking, the leading principal axes
    of ``X`` (or the coordinate axes without data); when growing, the
    identity padded with zero columns.
    """
    if d_in == d_out:
        return np.eye(d_in)
    if d_in > d_out:
        if X is not None and len(X) > 1:
            _, _, Vt = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)
            return Vt[:d_out].T.copy()
        return np.eye(d_in)[:, :d_out]
    return np.concatenate([np.eye(d_in), np.zeros((d_in, d_out - d_in))], axis=1)


class GpLayer(Module):
    """One sparse-GP layer: inducing inputs, kernel and a fixed mean map.

    ``mean_weights`` of ``None`` means a zero mean function.
    """

    def __init__(self, Z, d_out, mean_weights=None, lengthscale=1.0, amplitude=1.0):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or len(Z) < 1:
            raise dc.DimensionError(f"GpLayer: Z must be M x d_in with M >= 1, got {Z.shape}")
        if not np.all(np.isfinite(Z)):
            raise ValueError("GpLayer: inducing locations must be finite")
        self.Z = Tensor(Z, requires_grad=True)
        self.kernel = KernelParams(Z.shape[1], lengthscale, amplitude)
        self.d_out = int(d_out)
        self.mean_weights = None if mean_weights is None else np.asarray(mean_weights, dtype=np.float64)

    @property
    def M(self):
        return self.Z.shape[0]

    @property
    def d_in(self):
        return self.Z.shape[1]

    def mean_fn(self, F):
        if self.mean_weights is None:
            return None
        return F @ self.mean_weights

    def kzz(self):
        return ard_rbf(self.Z, self.Z, self.kernel)

    def chol(self):
        return dc.cholesky(self.kzz())


def gp_conditional(F_in, layer: GpLayer, U, chol=None):
    """Marginal mean and variance of ``f(F_in)`` given inducing values ``U``.

    ``U`` holds the deviation of the layer from its fixed mean map at ``Z``,
    so the mean is ``mean_fn(F_in) + K_xZ K_ZZ^{-1} U``.

    ``F_in`` is ``(S, n, d_in)`` and ``U`` is ``(S, M, d_out)``; 2-D inputs
    are treated as a single sample. Returns ``(mean, var)`` of shapes
    ``(S, n, d_out)`` and ``(S, n, 1)``.
    """
    F_in, U = dc.as_tensor(F_in), dc.as_tensor(U)
    squeeze = F_in.ndim == 2
    if squeeze:
        F_in = F_in.reshape(1, *F_in.shape)
    if U.ndim == 2:
        U = U.reshape(1, *U.shape)
    S, n, d_in = F_in.shape
    if d_in != layer.d_in:
        raise dc.DimensionError(f"gp_conditional: input width {d_in} != layer width {layer.d_in}")
    if U.shape[1:] != (layer.M, layer.d_out):
        raise dc.DimensionError(f"gp_conditional: U shape {U.shape} != (S, {layer.M}, {layer.d_out})")
    if U.shape[0] != S:
        if U.shape[0] == 1:
            U = dc.broadcast_to(U, (S,) + U.shape[1:])
        elif S == 1:
            S = U.shape[0]
            F_in = dc.broadcast_to(F_in, (S, n, d_in))
        else:
            raise dc.DimensionError(f"gp_conditional: {U.shape[0]} inducing samples vs {S} input samples")
    M, d_out = layer.M, layer.d_out
    Lz = layer.chol() if chol is None else chol

    flat = F_in.reshape(S * n, d_in)
    Kzx = ard_rbf(layer.Z, flat, layer.kernel)                   # (M, S n)
    A = dc.solve_triangular(Lz, Kzx)                               # (M, S n)
    var = layer.kernel.variance - dc.sum(dc.square(A), axis=0)
    var = dc.clip_min(var, 0.0).reshape(S, n, 1)

    R = U.transpose(1, 0, 2).reshape(M, S * d_out)
    beta = dc.solve_triangular(Lz, R).reshape(M, S, d_out).transpose(1, 0, 2)
    At = A.T.reshape(S, n, M)
    mean = At @ beta
    mx = layer.mean_fn(F_in)
    if mx is not None:
        mean = mean + mx
    if squeeze and S == 1:
        mean, var = mean.reshape(n, d_out), var.reshape(n, 1)
    return mean, var


def dgp_forward(x, U_list, layers, rng=None, sample=True, return_moments=False):
    """Propagate inputs through the stack; returns final-layer values ``(S, n, d_L)``.

    Each layer draws ``F = mean + sqrt(var) * eps`` (reparameterised). With
    ``sample=False`` the conditional means are used instead, which gives one
    coherent function per inducing-value sample.
    """
    if len(U_list) != len(layers):
        raise dc.DimensionError(f"dgp_forward: {len(U_list)} inducing sets for {len(layers)} layers")
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x
    U0 = dc.as_tensor(U_list[0])
    S = U0.shape[0] if U0.ndim == 3 else 1
    F = dc.as_tensor(x)
    if F.ndim == 2:
        F = dc.broadcast_to(F.reshape(1, *F.shape), (S,) + F.shape)
    moments = []
    for layer, U in zip(layers, U_list):
        U = dc.as_tensor(U)
        if U.ndim == 2:
            U = U.reshape(1, *U.shape)
        mean, var = gp_conditional(F, layer, U)
        moments.append((mean, var))
        if sample:
            eps = rng.standard_normal(mean.shape)
            F = mean + dc.sqrt(var + 1e-12) * eps
        else:
            F = mean
    return (F, moments) if return_moments else F


class Likelihood(Module):
    def __init__(self, kind="gaussian", noise_var=0.1):
        if kind not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown likelihood {kind!r}")
        if kind == "gaussian" and not noise_var > 0:
            raise ValueError("Gaussian noise variance must be positive")
        self.kind = kind
        if kind == "gaussian":
            self.log_noise = Tensor(np.log(noise_var), requires_grad=True)

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise.data)) if self.kind == "gaussian" else None


def likelihood_nll(F, y, lik: Likelihood):
    """Mean negative log-likelihood over samples and data points."""
    F = dc.as_tensor(F)
    y = np.asarray(y, dtype=np.float64)
    if F.ndim == 3:
        if F.shape[-1] != 1:
            raise dc.DimensionError(f"likelihood_nll: expected one output column, got {F.shape}")
        F = F.reshape(F.shape[:-1])
    if F.shape[-1] != y.shape[-1]:
        raise dc.DimensionError(f"likelihood_nll: {F.shape} vs targets {y.shape}")
    if lik.kind == "gaussian":
        r2 = dc.square(F - y)
        nll = 0.5 * (LOG_2PI + lik.log_noise) + 0.5 * r2 * dc.exp(-lik.log_noise)
    else:
        nll = dc.softplus(F) - F * y
    return dc.mean(nll)


def gaussian_kl(m, L, Kzz, chol=None):
    """``KL(N(m, L L^T) || N(0, Kzz))``.

    ``m`` may be ``(M,)`` with ``L`` ``(M, M)``, or ``(M, d)`` with ``L``
    ``(d, M, M)``; independent columns are summed.
    """
    m, L = dc.as_tensor(m), dc.as_tensor(L)
    Lk = dc.cholesky(Kzz) if chol is None else chol
    if m.ndim == 1:
        cols = [(m.reshape(-1, 1), L)]
    else:
        cols = [(m[:, j:j + 1], L[j]) for j in range(m.shape[1])]
    M = Lk.shape[0]
    logdet_k = 2.0 * dc.sum(dc.log(dc.diagonal(Lk)))
    total = 0.0
    for mj, Lj in cols:
        A = dc.solve_triangular(Lk, Lj)
        b = dc.solve_triangular(Lk, mj)
        logdet_q = 2.0 * dc.sum(dc.log(dc.diagonal(Lj)))
        total = total + 0.5 * (dc.sum(dc.square(A)) + dc.sum(dc.square(b)) - M + logdet_k - logdet_q)
    return total


def prior_logpdf(U, chol):
    """``log N(U; 0, K_ZZ)`` summed over output columns, one value per sample."""
    U = dc.as_tensor(U)
    if U.ndim == 2:
        U = U.reshape(1, *U.shape)
    S, M, d = U.shape
    R = U.transpose(1, 0, 2).reshape(M, S * d)
    B = dc.solve_triangular(chol, R).reshape(M, S, d)
    quad = dc.sum(dc.sum(dc.square(B), axis=2), axis=0)
    logdet = 2.0 * dc.sum(dc.log(dc.diagonal(chol)))
    return -0.5 * quad - 0.5 * d * logdet - 0.5 * M * d * LOG_2PI


def kmeans_inducing(X, M, rng):
    """Inducing inputs by k-means on (a subsample of) ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) > 2000:
        X = X[rng.choice(len(X), 2000, replace=False)]
    if len(X) <= M:
        extra = X[rng.integers(0, len(X), M - len(X))] + 1e-3 * rng.standard_normal((M - len(X), X.shape[1]))
        return np.concatenate([X, extra])
    seed = int(rng.integers(0, 2**31 - 1))
    centroids, _ = kmeans2(X, M, minit="++", seed=seed)
    return centroids


def build_layers(X, widths, M, rng, d_out=1):
    """Stack of layers for inputs ``X`` with hidden ``widths`` and final width ``d_out``.

    Inner layers get fixed linear mean maps; the final layer has zero mean.
    Deeper inducing inputs are the mean-map images of the first layer's.
    """
    X = np.asarray(X, dtype=np.float64)
    dims = [X.shape[1]] + list(widths) + [d_out]
    Z = kmeans_inducing(X, M, rng)
    H = X
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        W = None if last else linear_mean_map(a, b, H)
        layers.append(GpLayer(Z, b, W))
        if not last:
            Z, H = Z @ W, H @ W
    return layers
