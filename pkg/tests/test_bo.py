import numpy as np
import pytest

from dgptransport import bo
from dgptransport import diffcore as dc


class MeanOnly:
    """Surrogate with no posterior spread: every draw is the same function."""

    def __init__(self, f):
        self.f = f

    def sample_function(self, X, rng):
        return self.f(X)


def test_ackley_origin():
    assert bo.test_function("ackley", np.zeros(50)) == pytest.approx(0.0, abs=1e-12)


def test_rosenbrock_ones():
    assert bo.test_function("rosenbrock", np.ones(100)) == 0.0


def test_levy_ones():
    assert bo.test_function("levy", np.ones(20)) == pytest.approx(0.0, abs=1e-12)


def test_hartmann_optimum():
    assert bo.test_function("hartmann6", bo.HARTMANN6_ARGMIN) == pytest.approx(-3.3224, abs=1e-4)


def test_vectorised_evaluation():
    X = np.random.default_rng(0).uniform(0, 1, (5, 6))
    out = bo.test_function("hartmann6", X)
    assert out.shape == (5,)
    assert out[2] == pytest.approx(bo.test_function("hartmann6", X[2]))


def test_domain_checks():
    with pytest.raises(bo.DomainError):
        bo.test_function("hartmann6", np.full(6, 1.5))
    with pytest.raises(bo.DomainError):
        bo.test_function("ackley", np.full(3, -40.0))
    with pytest.raises(dc.DimensionError):
        bo.test_function("hartmann6", np.zeros(5))
    with pytest.raises(ValueError):
        bo.test_function("branin", np.zeros(2))


def test_pool_of_one():
    assert bo.thompson_step(MeanOnly(lambda X: X[:, 0]), np.array([[0.3, 0.2]]), None) == 0


def test_zero_variance_surrogate_picks_mean_argmin():
    pool = np.random.default_rng(1).uniform(0, 1, (50, 2))
    pick = bo.thompson_step(MeanOnly(lambda X: ((X - 0.5) ** 2).sum(1)), pool, np.random.default_rng(0))
    assert pick == int(np.argmin(((pool - 0.5) ** 2).sum(1)))


def test_ties_go_to_lowest_index():
    assert bo.thompson_step(MeanOnly(lambda X: np.zeros(len(X))), np.zeros((4, 1)), None) == 0


def test_seeded_choice_repeats():
    cfg = bo.BoConfig(surrogate="om", n_init=8, M=6, hidden=16, init_epochs=5, L=1)
    X = np.random.default_rng(2).uniform(0, 1, (8, 6))
    y = bo.hartmann6(X)
    pool = np.random.default_rng(3).uniform(0, 1, (40, 6))
    picks = []
    for _ in range(2):
        s = bo.DgpSurrogate(cfg)
        s.fit(X, y)
        picks.append(bo.thompson_step(s, pool, np.random.default_rng(4)))
    assert picks[0] == picks[1]


def test_random_trace_monotone():
    tr = bo.bo_run(bo.BoConfig(surrogate="random", n_init=5, n_iters=40, seed=1))
    assert len(tr.best) == 41
    assert np.all(np.diff(tr.best) <= 0)
    assert tr.regret[-1] == pytest.approx(tr.best[-1] + 3.32237)


def test_zero_iterations_is_initial_best():
    cfg = bo.BoConfig(surrogate="om", n_init=7, n_iters=0, seed=2)
    tr = bo.bo_run(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([2, 7]))
    y0 = bo.hartmann6(rng.uniform(0, 1, (7, 6)))
    assert tr.best == [float(y0.min())]
    assert tr.regret == [pytest.approx(y0.min() + 3.32237)]


def test_short_surrogate_run_records_every_iteration():
    cfg = bo.BoConfig(surrogate="dsvi", n_init=6, n_iters=2, pool_size=20, M=6, L=1,
                      init_epochs=3, refit_epochs=2, seed=0)
    tr = bo.bo_run(cfg)
    assert not tr.discarded and len(tr.regret) == 3
    assert np.all(np.diff(tr.best) <= 0)
    assert bo.BoTrace.from_json(tr.to_json()) == tr


def test_config_validation():
    with pytest.raises(ValueError):
        bo.BoConfig(pool_size=0)
    with pytest.raises(ValueError):
        bo.BoConfig(surrogate="gp-ucb")
    assert bo.BoConfig(surrogate="om-path").surrogate == "om"
    assert bo.BoConfig.full_budget().n_iters == 100
