import numpy as np
import pytest

from dgptransport import diffcore as dc
from dgptransport import transport as tr
from dgptransport.bridge import bridge_sample, reference_drift, solve_doob
from dgptransport.gp import dgp_forward, prior_logpdf
from dgptransport.harness import synth_toy_1d
from dgptransport.model import build_model


class LinearField:
    def __init__(self, a):
        self.a = a

    def __call__(self, U, s, ctx=None):
        return self.a * dc.as_tensor(U)


class NegRefField:
    """Exactly minus the reference drift: the path-term population optimum."""

    def __init__(self, sched):
        self.sched = sched

    def __call__(self, U, s, ctx):
        return -reference_drift(U, s, ctx, self.sched)


@pytest.fixture(scope="module")
def toy():
    return synth_toy_1d(40, 0)


def test_zero_field_is_identity():
    U0 = np.random.default_rng(0).standard_normal((2, 3, 1))
    traj = tr.euler_integrate(LinearField(0.0), U0, None, 7)
    np.testing.assert_array_equal(traj.end.data, U0)


def test_linear_decay_closed_form():
    U0 = np.ones((1, 2, 1))
    traj = tr.euler_integrate(LinearField(-1.0), U0, None, 10)
    np.testing.assert_allclose(traj.end.data, 0.9 ** 10 * U0, rtol=1e-12)
    assert len(traj.states) == 11 and traj.taus[-1] == pytest.approx(1.0)


def test_invalid_step_count():
    with pytest.raises(ValueError):
        tr.euler_integrate(LinearField(0.0), np.ones((1, 1, 1)), None, 0)


def test_integration_error_reports_step():
    with pytest.raises(tr.IntegrationError) as err, np.errstate(over="ignore"):
        tr.euler_integrate(LinearField(1e200), np.ones((1, 1, 1)), None, 5)
    assert err.value.step == 2


def test_hutchinson_identity_field_exact():
    U = np.random.default_rng(1).standard_normal((50, 3, 2))
    est = tr.hutchinson_div(tr.AffineField(np.eye(6)), U, 1.0, None, np.random.default_rng(0))
    np.testing.assert_allclose(est.data, 6.0)


def test_hutchinson_unbiased_random_matrix():
    rng = np.random.default_rng(2)
    A = 2 * np.eye(5) + 0.5 * rng.standard_normal((5, 5))
    est = tr.hutchinson_div(tr.AffineField(A), np.zeros((10_000, 5, 1)), 1.0, None, rng).data
    assert abs(est.mean() - np.trace(A)) <= 0.01 * abs(np.trace(A))


def test_hutchinson_antisymmetric_mean_zero():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((5, 5))
    est = tr.hutchinson_div(tr.AffineField(B - B.T), np.zeros((10_000, 5, 1)), 1.0, None, rng).data
    assert abs(est.mean()) <= 3 * est.std() / np.sqrt(len(est)) + 1e-12


def test_exact_divergence_of_affine_flow():
    rng = np.random.default_rng(4)
    A = 0.3 * rng.standard_normal((4, 4))
    field = tr.AffineField(A, b=rng.standard_normal(4))
    traj = tr.euler_integrate(field, rng.standard_normal((2, 4, 1)), None, 100, divergence="exact")
    np.testing.assert_allclose(traj.logdet.data, -np.trace(A), atol=1e-3)


def test_velocity_field_jvp_matches_finite_difference():
    rng = np.random.default_rng(5)
    field = tr.VelocityField(3, 2, rng, hidden=16)
    for lin in field.net.layers:
        lin.b.data = 0.1 * rng.standard_normal(lin.b.shape)
    field.net.layers[-1].W.data = 0.2 * rng.standard_normal(field.net.layers[-1].W.shape)
    U, ctx, dU = rng.standard_normal((2, 3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((2, 3, 2))
    _, jv = field.jvp(U, 0.4, ctx, dU)
    h = 1e-6
    num = (field(U + h * dU, 0.4, ctx).data - field(U - h * dU, 0.4, ctx).data) / (2 * h)
    np.testing.assert_allclose(jv.data, num, atol=1e-7)


def test_velocity_field_zero_at_init_and_shape_checked():
    field = tr.VelocityField(4, 1, np.random.default_rng(6), hidden=8)
    out = field(np.ones((3, 4, 1)), 0.5, np.zeros((4, 1)))
    assert out.shape == (3, 4, 1) and np.all(out.data == 0)
    with pytest.raises(dc.DimensionError):
        field(np.ones((3, 5, 1)), 0.5, np.zeros((4, 1)))
    with pytest.raises(dc.UsageError):
        field(np.ones((3, 4, 1)), 0.5, None)


def test_path_action_zero_at_population_optimum():
    sched = solve_doob()
    ctx = np.random.default_rng(7).standard_normal((5, 1))
    assert tr.path_residual(NegRefField(sched), ctx, sched, 10, 256, np.random.default_rng(0)) < 1e-24


def test_path_action_at_init_is_reference_energy(toy):
    model = build_model(toy.X_train, "om", M=5, hidden=8, seed=0)
    ctxs = [model.family.amortisers[i](l.Z) for i, l in enumerate(model.layers)]
    terms, pairs = tr.path_action_terms(model, ctxs, np.random.default_rng(0))
    for term, (s, U), ctx in zip(terms, pairs, ctxs):
        v = reference_drift(U, s, ctx, model.sched).data
        assert float(term.data) == pytest.approx(0.5 * np.sum(v ** 2))


def test_time_clip_share():
    model = build_model(np.zeros((3, 1)) + np.arange(3)[:, None], "om", M=3, N=10, hidden=8)
    rng = np.random.default_rng(1)
    times = []
    for _ in range(4000):
        _, pairs = tr.path_action_terms(model, [np.zeros((3, 1))] * 2, rng)
        times.extend(p[0] for p in pairs)
    times = np.array(times)
    assert times.min() == pytest.approx(0.1)
    assert np.mean(times == 0.1) == pytest.approx(0.1, abs=0.015)


def test_beta_schedule():
    assert tr.beta_schedule(0) == pytest.approx(1e-3)
    assert tr.beta_schedule(10) == pytest.approx(10 ** -1.5)
    assert tr.beta_schedule(20) == 1.0 and tr.beta_schedule(50) == 1.0
    assert tr.beta_schedule(None) == 1.0


def test_cnfom_alpha_zero_equals_cnf(toy):
    model = build_model(toy.X_train, "cnfom", M=5, hidden=8, seed=0)
    a = tr.cnf_loss(toy.X_train, toy.y_train, model, np.random.default_rng(3)).total.data
    b = tr.cnfom_loss(toy.X_train, toy.y_train, model, np.random.default_rng(3), alpha=0.0).total.data
    assert np.array_equal(a, b)


def test_cnfom_difference_is_weighted_path(toy):
    model = build_model(toy.X_train, "cnfom", M=5, hidden=8, seed=0)
    a = tr.cnf_loss(toy.X_train, toy.y_train, model, np.random.default_rng(3))
    b = tr.cnfom_loss(toy.X_train, toy.y_train, model, np.random.default_rng(3), alpha=2.5)
    assert b.path_action >= 0
    assert b.value - a.value == pytest.approx(2.5 * b.path_action / model.n_train, rel=1e-10)


def test_prior_flow_starts_at_prior_and_surrogate_matches(toy):
    model = build_model(toy.X_train, "vanilla_fbvi", M=5, hidden=8, seed=0)
    rng = np.random.default_rng(4)
    U_list, info = tr.sample_inducing(model, 8, rng)
    for U, V, layer in zip(U_list, info["V"], model.layers):
        np.testing.assert_allclose(U.data, (layer.chol() @ V).data)
    lb = tr.vanilla_fbvi_loss(toy.X_train, toy.y_train, model, np.random.default_rng(5))
    U_list, _ = tr.sample_inducing(model, model.mc_train, np.random.default_rng(5))
    want = -sum(float(np.mean(prior_logpdf(U, l.chol()).data)) for U, l in zip(U_list, model.layers))
    assert lb.kl == pytest.approx(want)


def test_prior_flow_variance_twice_bridge(toy):
    prior = build_model(toy.X_train, "vanilla_fbvi", M=6, hidden=8, seed=0)
    bridge = build_model(toy.X_train, "om", M=6, hidden=8, seed=0)
    vp = tr.sample_inducing(prior, 4000, np.random.default_rng(0))[1]["V"][-1].data.var()
    vb = tr.sample_inducing(bridge, 4000, np.random.default_rng(0))[1]["V"][-1].data.var()
    assert vp == pytest.approx(1.0, abs=0.03)
    assert vb == pytest.approx(0.505, abs=0.02)


def test_seeded_losses_repeat(toy):
    for obj in ("om", "cnf", "cnfom", "implicit_q", "vanilla_fbvi", "dsvi"):
        model = build_model(toy.X_train, obj, M=5, hidden=8, seed=0)
        a = tr.objective_loss(model, toy.X_train, toy.y_train, np.random.default_rng(1), epoch=3).value
        b = tr.objective_loss(model, toy.X_train, toy.y_train, np.random.default_rng(1), epoch=3).value
        assert a == b


def test_dsvi_kl_zero_when_q_is_prior(toy):
    model = build_model(toy.X_train, "dsvi", L=1, M=5, seed=0)
    lb = tr.dsvi_loss(toy.X_train, toy.y_train, model, np.random.default_rng(0))
    assert abs(lb.kl) < 1e-8


def test_objective_family_mismatch_rejected(toy):
    model = build_model(toy.X_train, "om", M=5, hidden=8)
    with pytest.raises(dc.UsageError):
        tr.dsvi_loss(toy.X_train, toy.y_train, model, np.random.default_rng(0))


def test_few_step_default_matches_training_count(toy):
    model = build_model(toy.X_train, "om", M=5, hidden=8, seed=0)
    for lin in model.family.fields[0].net.layers:
        lin.W.data = lin.W.data + 0.1
    a = tr.few_step_predict(model, toy.X_test, model.N, 4, np.random.default_rng(2)).data
    rng = np.random.default_rng(2)
    U_list, _ = tr.sample_inducing(model, 4, rng)
    b = dgp_forward(toy.X_test, U_list, model.layers, rng).data
    assert np.array_equal(a, b)


def test_one_step_is_single_euler_step():
    sched = solve_doob()
    rng = np.random.default_rng(3)
    field = tr.VelocityField(2, 1, rng, hidden=8)
    field.net.layers[-1].W.data = rng.standard_normal(field.net.layers[-1].W.shape)
    ctx = rng.standard_normal((2, 1))
    U0 = bridge_sample(1.0, ctx, sched, rng).data[None]
    end = tr.euler_integrate(field, U0, ctx, 1).end.data
    np.testing.assert_allclose(end, U0 + field(U0, 1.0, ctx).data)


def test_path_only_training_reduces_residual():
    sched = solve_doob()
    rng = np.random.default_rng(8)
    field = tr.VelocityField(3, 1, rng, hidden=32)
    ctx = rng.standard_normal((3, 1))
    before = tr.path_residual(field, ctx, sched, 10, 512, np.random.default_rng(1))
    trace = tr.fit_path_term(field, ctx, sched, 10, 300, np.random.default_rng(2))
    after = tr.path_residual(field, ctx, sched, 10, 512, np.random.default_rng(1))
    assert after < 0.1 * before
    assert np.mean(trace[-20:]) < np.mean(trace[:20])


def test_probe_counter_counts_steps_per_layer(toy):
    model = build_model(toy.X_train, "cnf", M=5, N=6, hidden=8, seed=0)
    tr.reset_probe_count()
    tr.cnf_loss(toy.X_train, toy.y_train, model, np.random.default_rng(0))
    assert tr.probe_count() == 6 * len(model.layers)
    tr.reset_probe_count()
    tr.om_loss(toy.X_train, toy.y_train, build_model(toy.X_train, "om", M=5, hidden=8), np.random.default_rng(0))
    assert tr.probe_count() == 0
