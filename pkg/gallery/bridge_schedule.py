"""
The bridge schedule
===================

Solve for the mean and variance coefficients of the reference bridge, then
check that particles pushed along the reference drift keep those moments.
"""

import numpy as np

from dgptransport.bridge import BridgeParams, bridge_sample, reference_drift, solve_doob

sched = solve_doob(BridgeParams(lam=1.0, g=1.0, sigma0=1.0, grid_n=100))

print("   s     phi    kappa")
for s in (0.1, 0.25, 0.5, 0.75, 1.0):
    phi, kappa, _, _ = sched.lookup(s)
    print(f"{s:5.2f}  {phi:.4f}  {kappa:.4f}")

###############################################################################
# A faster decay rate shrinks both coefficients at the endpoint.

for lam in (0.5, 1.0, 2.0, 4.0):
    sc = solve_doob(BridgeParams(lam=lam))
    print(f"lambda={lam:<4} phi(1)={sc.phi[-1]:.4f} kappa(1)={sc.kappa[-1]:.4f}")

###############################################################################
# Particles started at s=0.1 and moved by Euler steps along the drift.

rng = np.random.default_rng(0)
ctx = np.array([[1.0], [-0.5]])
U = bridge_sample(np.full(4096, 0.1), ctx, sched, rng).data
s, h = 0.1, 0.9 / 400
for _ in range(400):
    U = U + h * reference_drift(U, s, ctx, sched).data
    s += h
phi, kappa, _, _ = sched.lookup(1.0)
print("mean at s=1:", U.mean(0).ravel(), "target:", (phi * ctx).ravel())
print(f"variance at s=1: {U.var(0, ddof=1).mean():.4f}  target: {kappa:.4f}")
