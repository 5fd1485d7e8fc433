import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from phishtriage import econometrics as eco
from phishtriage.app.synth import PM1_MEDIANS, poisson_world

from oracles import chi2_sf_quad, poisson_newton_oracle


def _trig(**kw):
    return [kw.get(name, 0) for name in eco.TRIGGERS]


def _design(X, y, names):
    return eco.Design([f"r{i}" for i in range(len(y))], y, X, [eco.INTERCEPT, *names])


def _world(n=500, a=1.0, b=0.02, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.poisson(30, n).astype(float)
    y = rng.poisson(np.exp(a + b * x)).astype(float)
    return _design(np.column_stack([np.ones(n), x]), y, ["x"])


def test_intercept_only_constant_counts():
    f = eco.fit_poisson(_design(np.ones((4, 1)), np.full(4, 5.0), []))
    assert f.coef[0] == pytest.approx(math.log(5), abs=1e-10)
    assert f.deviance == pytest.approx(0.0, abs=1e-10)
    assert f.converged
    # adjusted pseudo R2 of the null model is not positive
    assert f.adj_mcfadden_r2 <= 0


def test_recovers_coefficients_and_agrees_with_grid_oracle():
    d = _world(seed=1)
    f = eco.fit_poisson(d)
    assert abs(f.coef[0] - 1.0) <= 3 * f.se[0] and abs(f.coef[1] - 0.02) <= 3 * f.se[1]
    # coarse grid search over (alpha, beta): no grid point may beat the IRLS optimum
    A, B = np.meshgrid(np.linspace(0.5, 1.5, 101), np.linspace(0.01, 0.03, 101))
    eta = A.ravel()[:, None] + B.ravel()[:, None] * d.X[:, 1][None, :]
    ll = stats.poisson.logpmf(d.y[None, :], np.exp(eta)).sum(axis=1)
    best = np.argmax(ll)
    assert f.loglik >= ll[best] - 1e-9
    assert abs(A.ravel()[best] - f.coef[0]) <= 0.02
    assert abs(B.ravel()[best] - f.coef[1]) <= 0.0004


@pytest.mark.parametrize("seed", range(5))
def test_loglik_matches_newton_oracle(seed):
    w = poisson_world(400, {**PM1_MEDIANS}, seed=seed)
    d = eco.Design([str(i) for i in range(len(w.y))], w.y, w.X, w.columns)
    f = eco.fit_poisson(d)
    beta, ll = poisson_newton_oracle(w.X, w.y)
    assert abs(f.loglik - ll) <= 1e-6 * abs(ll)
    assert np.allclose(f.coef, beta, atol=1e-5)


def test_weighted_fit_equals_replicated_rows():
    d = _world(60, seed=3)
    wts = np.random.default_rng(0).integers(0, 4, d.n).astype(float)
    f = eco.fit_poisson(d, weights=wts)
    rep = np.repeat(np.arange(d.n), wts.astype(int))
    g = eco.fit_poisson(eco.Design([str(i) for i in rep], d.y[rep], d.X[rep], d.columns))
    assert np.allclose(f.coef, g.coef, atol=1e-8)
    assert f.loglik == pytest.approx(g.loglik, rel=1e-10)


def test_rank_deficiency_names_columns():
    d = _world(50)
    X = np.column_stack([d.X, 2 * d.X[:, 1]])
    with pytest.raises(eco.FitError, match="collinear columns: dup"):
        eco.fit_poisson(_design(X, d.y, ["x", "dup"]))


def test_non_integer_y_rejected():
    with pytest.raises(eco.FitError):
        eco.fit_poisson(_design(np.ones((5, 1)), np.array([1.5, 2, 3, 4, 5]), []))


def _rows(n=300, seed=0):
    from phishtriage.app.synth import triage_stream

    return triage_stream(n, seed=seed).rows


def test_stepwise_nested_deviance_and_anova():
    d = eco.build_design(_rows(), eco.STEP_ORDER)
    fits = eco.stepwise(d)
    assert [f.k for f in fits] == list(range(2, 9))
    assert [f.model_id for f in fits] == [f"M{i}" for i in range(1, 8)]
    devs = [f.deviance for f in fits]
    assert all(b <= a + 1e-8 for a, b in zip(devs, devs[1:]))
    stat, df, p = eco.anova_chisq(fits[0], fits[1])
    assert df == 1 and stat == pytest.approx(fits[0].deviance - fits[1].deviance)
    assert eco.anova_chisq(fits[2], fits[2]) == (0.0, 0, 1.0)
    with pytest.raises(eco.FitError):
        eco.anova_chisq(fits[3], fits[1])


@pytest.mark.parametrize("stat,df", [(6.63, 1), (10.83, 1), (3.0, 2), (12.5, 5), (0.2, 1)])
def test_chi2_pvalue_against_quadrature(stat, df):
    assert eco.chi2_pvalue(stat, df) == pytest.approx(chi2_sf_quad(stat, df), abs=5e-6)


def test_adj_mcfadden_formula():
    assert eco.adj_mcfadden(-50.0, -100.0, 3) == pytest.approx(1 - (-50 - 3) / -100)


def test_build_design_rounds_half_up_and_filters():
    rows = [eco.DesignRow("a", 9.5, (1,) * 6, 2), eco.DesignRow("b", 9.49, (0,) * 6, 1),
            eco.DesignRow("c", 12.5, (2,) * 6, 0)]
    d = eco.build_design(rows, ["Scarcity"], min_clicks=10)
    assert d.email_ids == ["a", "c"] and d.y.tolist() == [10.0, 13.0]
    assert d.columns == [eco.INTERCEPT, "Scarcity"]


def test_design_csv_roundtrip(tmp_path):
    rows = _rows(20)
    eco.write_design_csv(rows, tmp_path / "d.csv")
    assert eco.read_design_csv(tmp_path / "d.csv") == rows


def test_bootstrap_rejects_small_B():
    with pytest.raises(eco.FitError):
        eco.bootstrap_fit(_world(50), B=99)


def test_bootstrap_reproducible_and_roundtrips(tmp_path):
    d = _world(80, seed=2)
    a = eco.bootstrap_fit(d, B=150, seed=4, chunk=40)
    b = eco.bootstrap_fit(d, B=150, seed=4, chunk=150)
    assert np.array_equal(a.draws, b.draws)  # chunking does not change the resamples
    assert a.B + a.dropped == 150
    a.save(tmp_path / "bs.json")
    side = (tmp_path / "bs.f64").read_bytes()
    assert len(side) == a.draws.size * 8
    assert np.array_equal(np.frombuffer(side, "<f8").reshape(a.draws.shape), a.draws)
    c = eco.BootstrapFit.load(tmp_path / "bs.json")
    assert np.array_equal(c.draws, a.draws) and c.columns == a.columns


def test_batched_newton_matches_weighted_irls():
    d = _world(70, seed=5)
    base = eco.fit_poisson(d)
    W = np.random.default_rng(1).multinomial(d.n, np.full(d.n, 1 / d.n), size=6).astype(float)
    betas, conv = eco._batched_newton(d.X, d.y, W, base.coef)
    for r in range(6):
        assert conv[r]
        assert np.allclose(betas[r], eco.fit_poisson(d, weights=W[r]).coef, atol=1e-7)


def test_bootstrap_constant_y():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(40), rng.poisson(5, 40)])
    bf = eco.bootstrap_fit(_design(X, np.full(40, 7.0), ["x"]), B=100, seed=1)
    assert np.allclose(bf.draws[:, 0], math.log(7), atol=1e-6)
    assert np.allclose(bf.draws[:, 1], 0.0, atol=1e-7)


counts_arrays = st.lists(st.integers(0, 4), min_size=1, max_size=12).filter(lambda c: sum(c) > 0)


@given(counts_arrays, st.integers(0, 10_000))
def test_weighted_quantiles_equal_expanded_quantiles(counts, seed):
    vals = np.random.default_rng(seed).normal(size=len(counts))
    qs = (0.0, 0.025, 0.3, 0.5, 0.975, 1.0)
    got = eco.weighted_sample_quantiles(vals[None, :], np.asarray(counts, float)[None, :], qs)[0]
    want = np.quantile(np.repeat(vals, counts), qs)
    assert np.allclose(got, want, atol=1e-12)


def test_pinned_pm1_zero_email():
    bf = eco.BootstrapFit.pinned([eco.INTERCEPT, *eco.MODELS["PM1"]], [PM1_MEDIANS[c] for c in
                                                                      [eco.INTERCEPT, *eco.MODELS["PM1"]]], "PM1")
    (s,) = eco.predict_clicks(bf, [("z", [0] * 6, 0)], "PM1", draws=1000, seed=0)
    assert s.predicted_clicks_q50 == pytest.approx(math.exp(4.35), abs=1e-9)
    assert s.predicted_clicks_q025 == s.predicted_clicks_q50 == s.predicted_clicks_q975


def test_prediction_monotone_in_scarcity_and_order_free():
    d = eco.build_design(_rows(300, seed=3), eco.STEP_ORDER).select(eco.MODELS["PM1"])
    bf = eco.bootstrap_fit(d, B=200, seed=2)
    assert bf.quantiles["Scarcity"][1] > 0
    items = [(f"e{i}", _trig(Reciprocity=1, Consistency=2, Authority=3, Scarcity=10 + i), 4) for i in range(5)]
    scores = eco.predict_clicks(bf, items, "PM1", draws=2000, seed=5)
    q50 = [s.predicted_clicks_q50 for s in scores]
    assert q50 == sorted(q50) and len(set(q50)) == 5
    rev = eco.predict_clicks(bf, items[::-1], "PM1", draws=2000, seed=5)[::-1]
    assert [s.to_row() for s in rev] == [s.to_row() for s in scores]
    for s in scores:
        assert s.predicted_clicks_q025 <= s.predicted_clicks_q50 <= s.predicted_clicks_q975


def test_in_domain_rule():
    bf = eco.BootstrapFit.pinned([eco.INTERCEPT, *eco.MODELS["PM1"]], [1, 0, 0, 0, 0], "PM1")
    stats_ = {"Reciprocity": (5, 2), "Consistency": (5, 2), "Scarcity": (5, 2), "SpoofDist": (5, 2)}
    t = _trig(Reciprocity=5, Consistency=6, Scarcity=4)
    inside, outside = eco.predict_clicks(bf, [("a", t, 7), ("b", t, 8)],
                                         "PM1", draws=10, seed=0, training_stats=stats_)
    assert inside.in_domain and not outside.in_domain


def test_predict_rejects_mismatched_model():
    bf = eco.BootstrapFit.pinned([eco.INTERCEPT, "Scarcity"], [1, 0], "M?")
    with pytest.raises(eco.FitError):
        eco.predict_clicks(bf, [("a", [0] * 6, 0)], "PM1")


def test_triage_rank_order_and_ties():
    S = eco.TriageScore
    ranked = eco.triage_rank([S("lo", 10, 1, 10, 20, "PM1", True), S("hi", 80, 1, 80, 90, "PM1", True),
                              S("tie_a", 30, 1, 50, 60, "PM1", True), S("tie_b", 40, 1, 50, 60, "PM1", True)])
    assert [s.email_id for s in ranked] == ["hi", "tie_b", "tie_a", "lo"]


def test_scores_roundtrip(tmp_path):
    s = [eco.TriageScore("a", 1.5, 1.0, 1.25, 2.0, "PM1", True)]
    eco.write_scores(s, tmp_path / "q.csv")
    assert eco.read_scores(tmp_path / "q.csv") == s


def test_simple_scan_constant_and_slope_recovery():
    rng = np.random.default_rng(7)
    rows = []
    for i in range(400):
        trig = tuple(int(v) for v in rng.integers(0, 2, 6))
        vc = sum(t > 0 for t in trig)
        y = rng.poisson(math.exp(2.8 + 0.12 * vc))
        trig = tuple(0 if name == "Liking" else v for name, v in zip(eco.TRIGGERS, trig))
        rows.append(eco.DesignRow(f"r{i}", float(y), trig, 3))
    results, table = eco.simple_poisson_scan(rows, min_clicks=0)
    by = {r.regressor: r for r in results}
    assert by["Liking"].beta == 0.0 and by["Liking"].p == 1.0
    assert by[eco.SPOOF].beta == 0.0
    assert by["VulnCount"].beta > 0
    assert len(table) == 6 * 400


def test_simple_scan_recovers_slope():
    rng = np.random.default_rng(8)
    rows = []
    for i in range(500):
        trig = tuple(int(v) for v in rng.integers(0, 2, 6))
        y = rng.poisson(math.exp(2.5 + 0.12 * sum(trig)))
        rows.append(eco.DesignRow(f"r{i}", float(y), trig, 2))
    by = {r.regressor: r for r in eco.simple_poisson_scan(rows, min_clicks=0)[0]}
    assert abs(by["VulnCount"].beta - 0.12) <= 3 * by["VulnCount"].se
