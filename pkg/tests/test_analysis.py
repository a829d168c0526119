import itertools

import numpy as np
import pytest

from dgptransport import analysis as an
from dgptransport import diffcore as dc
from dgptransport import harness as hn
from dgptransport import transport as tr
from dgptransport.analysis import DegenerateSampleError, PairedSample


def test_all_favourable_pairs_exact_p():
    a = np.arange(10.0)
    res = an.wilcoxon_one_sided(PairedSample(a, a + 1 + np.arange(10) * 0.1))
    assert res.exact and res.n == 10 and res.statistic == 0
    assert res.p == pytest.approx(1 / 1024)


def test_identical_samples_degenerate():
    with pytest.raises(DegenerateSampleError):
        an.wilcoxon_one_sided(PairedSample(np.ones(8), np.ones(8)))
    with pytest.raises(DegenerateSampleError):
        an.wilcoxon_one_sided(PairedSample([1, 2, 3, 4.0], [2, 3, 4, 5.0]))


def test_unequal_lengths_rejected():
    with pytest.raises(dc.DimensionError):
        PairedSample([1.0, 2.0], [1.0])


def test_exact_p_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 5, 9).astype(float)
    b = rng.integers(0, 5, 9).astype(float)
    b[a == b] += 1
    d = a - b
    ranks = an._ranks(np.abs(d))
    w = ranks[d > 0].sum()
    null = [sum(r for r, s in zip(ranks, sg) if s) for sg in itertools.product((0, 1), repeat=9)]
    want = np.mean(np.array(null) <= w + 1e-9)
    assert an.wilcoxon_one_sided(PairedSample(a, b)).p == pytest.approx(want)


def test_sign_flip_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.standard_normal(9), rng.standard_normal(9)
        p_ab = an.wilcoxon_one_sided(PairedSample(a, b)).p
        p_ba = an.wilcoxon_one_sided(PairedSample(b, a)).p
        # continuous data: the two tails overlap in exactly one atom
        n = 9
        r = np.arange(1, n + 1)
        w = an.wilcoxon_one_sided(PairedSample(a, b)).statistic
        atom = np.mean([(np.array(sg) @ r) == w for sg in itertools.product((0, 1), repeat=n)])
        assert p_ab + p_ba == pytest.approx(1 + atom)


def test_exact_and_normal_agree_at_twelve():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b = rng.standard_normal(12), rng.standard_normal(12) + 0.3
        pe = an.wilcoxon_one_sided(PairedSample(a, b), exact=True).p
        pn = an.wilcoxon_one_sided(PairedSample(a, b), exact=False).p
        assert abs(pe - pn) < 0.02


def test_large_n_uses_normal_approximation():
    rng = np.random.default_rng(3)
    res = an.wilcoxon_one_sided(PairedSample(rng.standard_normal(30), rng.standard_normal(30)))
    assert not res.exact and 0 <= res.p <= 1


RAW = [0.35, 0.93, 0.98, 0.25, 0.99, 0.014, 0.002, 0.19, 0.99, 0.54, 0.35, 0.99, 0.014, 0.002]


def test_bh_table_values():
    q = an.bh_adjust(RAW, 14)
    assert round(q[6], 3) == 0.014 and round(q[13], 3) == 0.014
    assert round(q[5], 2) == 0.05
    assert abs(q[5] - 0.048) < 0.002


def test_bh_simple_cases():
    np.testing.assert_allclose(an.bh_adjust([0.3] * 4), [0.3] * 4)
    np.testing.assert_allclose(an.bh_adjust([0.02]), [0.02])
    np.testing.assert_allclose(an.bh_adjust([0.9, 0.8], m=4), [1.0, 1.0])
    assert len(an.bh_adjust([])) == 0
    with pytest.raises(ValueError):
        an.bh_adjust([1.2])
    with pytest.raises(ValueError):
        an.bh_adjust([0.1, 0.2], m=1)


def test_bh_monotone_and_permutation_invariant():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.uniform(0, 1, 15) ** 3
        q = an.bh_adjust(p)
        order = np.argsort(p)
        assert np.all(np.diff(q[order]) >= -1e-15)
        assert np.all(q >= p) and np.all(q <= 1)
        perm = rng.permutation(15)
        np.testing.assert_allclose(an.bh_adjust(p[perm]), q[perm])


def test_bonferroni_values():
    out = an.bonferroni([0.002, 0.014, 0.35], m=14)
    assert out[0] == pytest.approx(0.028)
    assert out[1] == pytest.approx(0.196)
    assert out[2] == 1.0


@pytest.mark.parametrize("nll,want", [(1.149, 0.583), (0.117, 0.074), (0.722, 0.248)])
def test_a2_values(nll, want):
    assert float(an.a2_noise_estimate(nll)) == pytest.approx(want, abs=1e-3)


def test_a2_increasing():
    v = an.a2_noise_estimate(np.linspace(-2, 3, 50))
    assert np.all(np.diff(v) > 0)


def test_cov_deterministic_loss_is_zero():
    w = dc.tensor(np.array([1.0, -2.0]), requires_grad=True)
    assert an.grad_cov_probe([w], lambda rng: dc.sum(dc.square(w)), n_draws=20) == 0.0


def test_cov_gaussian_mean_oracle():
    # loss = w * mean(z), z ~ N(mu, 1) with K draws: gradient norm |mean(z)|
    w = dc.tensor(1.0, requires_grad=True)
    mu, K = 3.0, 4
    cov = an.grad_cov_probe([w], lambda rng: w * float(np.mean(mu + rng.standard_normal(K))), n_draws=200)
    sd = 1 / np.sqrt(K)
    assert cov == pytest.approx(sd / mu, rel=0.2)


def test_rate_study_linear_field():
    U0 = np.random.default_rng(5).standard_normal((16, 3))
    study = an.euler_rate_study(lambda N: U0 * (1 - 1 / N) ** N, N_list=(20, 40, 80, 160), reference_N=10 ** 6)
    assert study.slope == pytest.approx(-2.0, abs=0.1)


def test_rate_study_zero_field_exact():
    U0 = np.ones((4, 2))
    study = an.euler_rate_study(lambda N: U0, N_list=(5, 10))
    assert study.exact and np.isnan(study.slope)
    assert study.errors == [0.0, 0.0]


def test_plotdata_empty_is_header_only(tmp_path):
    path = tmp_path / "p.csv"
    assert an.emit_plotdata([], "final", path) == 0
    assert path.read_text().strip() == ",".join(an.PLOT_FIELDS)


def test_plotdata_round_trip(tmp_path):
    recs = [{"objective": "om", "dataset": "toy", "seed": s,
             "history": [{"epoch": e, "loss": 1.0 / (e + 1)} for e in range(3)]} for s in range(2)]
    path = tmp_path / "p.csv"
    n = an.emit_plotdata(recs, "training", path)
    header, rows = an.read_plotdata(path)
    assert tuple(header) == an.PLOT_FIELDS and n == len(rows) == 6
    want = [tuple(str(c) for c in r) for r in an.plot_rows(recs, "training")]
    assert rows == want


def test_plotdata_fewstep_rows():
    recs = [{"method": m, "dataset": "toy", "seed": 0,
             "fewstep": {str(k): {"rmse": 0.1 * k} for k in (1, 2, 4, 10)}} for m in ("om", "cnf")]
    rows = an.plot_rows(recs, "fewstep")
    assert len(rows) == 8
    assert len({(r[0], r[1], r[3]) for r in rows}) == 8
    with pytest.raises(ValueError):
        an.plot_rows(recs, "pie")


def test_cov_om_not_above_cnf_on_most_toys():
    wins = 0
    for ds in (hn.synth_toy_1d(200, 0), hn.synth_heteroscedastic(200, 1), hn.synth_toy_1d(200, 2)):
        cov = {}
        for obj in ("om", "cnf"):
            model, _ = hn.train(hn.TrainConfig(objective=obj, M=16, hidden=64, epochs=20), ds)
            x, y = ds.X_train, ds.y_train
            cov[obj] = an.grad_cov_probe(model.parameters(),
                                         lambda rng, m=model: tr.objective_loss(m, x, y, rng), n_draws=200)
        wins += cov["om"] <= cov["cnf"]
    assert wins >= 2
