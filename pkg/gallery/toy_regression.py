"""
Fitting a one-dimensional toy
=============================

Train the path-regularised transport model on a smooth 1-D function with
small noise and compare its predictive mean to the truth.
"""

import numpy as np

from dgptransport.harness import TrainConfig, predictive_gaussian, synth_toy_1d, toy_function, train

ds = synth_toy_1d(500, seed=0)
config = TrainConfig(objective="om", M=32, epochs=60, batch=128, seed=0)
model, record = train(config, ds)

print(f"test rmse {record.metrics['rmse']:.3f}  nll {record.metrics['nll']:.3f}")
print("coverage:", record.coverage)

###############################################################################
# Predictions in raw units on a coarse grid. The band widens past the data.

x = np.linspace(-4, 4, 9)[:, None]
mean, epi = predictive_gaussian(model, ds.standardize_x(x), 128, np.random.default_rng(1))
sd = np.sqrt(epi + model.lik.noise_var) * ds.y_std
for xi, m, s in zip(x[:, 0], ds.unstandardize_y(mean), sd):
    print(f"x={xi:+.1f}  truth={toy_function(xi):+.3f}  pred={m:+.3f} +/- {2 * s:.3f}")
