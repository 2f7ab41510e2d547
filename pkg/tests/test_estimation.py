"""Effect estimation: WLS sandwich, bounds, duration model, placebo."""

import warnings
from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest

from histcontrol.estimation import (
    BONFERRONI_FAMILY,
    EffectEstimate,
    OutcomePanel,
    StratumOutcomes,
    bonferroni,
    derive_outcomes,
    fit_cll,
    morbidity_bounds,
    placebo_test,
    subgroup_analysis,
    uniform_stratum_weights,
    wls_atet,
)
from histcontrol.estimation import _cll_loglik_parts
from histcontrol.records import CohortAssignment, Registry

from conftest import make_patient, rx

HORIZONS = {"DEAD": 24, "PAIN": 24, "SRE": 24}


def panel_from_dead(
    treated_dead: np.ndarray,
    comparison_dead: np.ndarray,
    weights: np.ndarray = None,
    w: int = 4,
) -> OutcomePanel:
    """Panel with the given absorbing DEAD matrices and morbidity zeros."""
    n_t, m = treated_dead.shape
    n_c = comparison_dead.shape[0]
    if weights is None:
        weights = np.full(n_c, n_t / n_c)

    def morbidity(dead):
        # alternating patient-level morbidity so complete-case means vary
        out = np.zeros_like(dead, dtype=float)
        for i in range(dead.shape[0]):
            out[i, :] = float(i % 2)
            death = np.flatnonzero(dead[i] == 1)
            if death.size:
                out[i, death[0]:] = np.nan
        return out

    t_ids = [f"T{i}" for i in range(n_t)]
    c_ids = [f"C{i}" for i in range(n_c)]
    stratum = StratumOutcomes(
        w=w,
        treated_ids=t_ids,
        comparison_ids=c_ids,
        comparison_weights=np.asarray(weights, dtype=float),
        treated={
            "DEAD": treated_dead.astype(float),
            "PAIN": morbidity(treated_dead),
            "SRE": morbidity(treated_dead),
        },
        comparison={
            "DEAD": comparison_dead.astype(float),
            "PAIN": morbidity(comparison_dead),
            "SRE": morbidity(comparison_dead),
        },
    )
    return OutcomePanel(
        strata={w: stratum},
        horizons=dict(HORIZONS),
        treated_dtp={pid: w for pid in t_ids},
    )


def absorbing(death_periods, m=24):
    """Rows of an absorbing DEAD matrix from death periods (None = alive)."""
    rows = []
    for dp in death_periods:
        row = np.zeros(m)
        if dp is not None:
            row[dp - 1 :] = 1.0
        rows.append(row)
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# sandwich covariance


def hand_ehw_single_stratum(y, treat, weight):
    """Direct-arithmetic WLS + HC0 for y on (1, T), scalar sums only."""
    s_w = s_wt = s_wy = s_wty = 0.0
    for yi, ti, wi in zip(y, treat, weight):
        s_w += wi
        s_wt += wi * ti
        s_wy += wi * yi
        s_wty += wi * ti * yi
    # normal equations: [[s_w, s_wt], [s_wt, s_wt]] beta = [s_wy, s_wty]
    det = s_w * s_wt - s_wt * s_wt
    b0 = (s_wt * s_wy - s_wt * s_wty) / det
    b1 = (s_w * s_wty - s_wt * s_wy) / det
    m00 = m01 = m11 = 0.0
    for yi, ti, wi in zip(y, treat, weight):
        e = yi - b0 - b1 * ti
        g = wi * e
        m00 += g * g
        m01 += g * g * ti
        m11 += g * g * ti * ti
    # bread = inverse of [[s_w, s_wt], [s_wt, s_wt]]
    i00 = s_wt / det
    i01 = -s_wt / det
    i11 = s_w / det
    # var(b1) = last row of bread @ meat @ bread
    r0 = i01 * m00 + i11 * m01
    r1 = i01 * m01 + i11 * m11
    var_b1 = r0 * i01 + r1 * i11
    return b1, np.sqrt(var_b1)


def test_ehw_matches_hand_computation_six_obs():
    # 3 treated, 3 weighted comparisons, outcomes at month 1
    treated_dead = absorbing([1, None, 1])
    comparison_dead = absorbing([None, None, 1])
    weights = np.array([0.5, 1.5, 1.0])
    panel = panel_from_dead(treated_dead, comparison_dead, weights)
    est = wls_atet(panel, "DEAD", 1)

    y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0]
    treat = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
    weight = [1.0, 1.0, 1.0, 0.5, 1.5, 1.0]
    beta, se = hand_ehw_single_stratum(y, treat, weight)
    assert abs(est.beta - beta) < 1e-10
    assert abs(est.se - se) < 1e-10


def test_wls_beta_equals_weighted_mean_difference():
    rng = np.random.default_rng(2)
    treated_dead = absorbing([1 if u < 0.4 else None for u in rng.uniform(size=25)])
    comparison_dead = absorbing([1 if u < 0.2 else None for u in rng.uniform(size=80)])
    weights = rng.uniform(0.1, 1.0, size=80)
    panel = panel_from_dead(treated_dead, comparison_dead, weights)
    est = wls_atet(panel, "DEAD", 1)
    y_t = treated_dead[:, 0].mean()
    y_c = float(weights @ comparison_dead[:, 0] / weights.sum())
    assert abs(est.beta - (y_t - y_c)) < 1e-10


def test_cluster_se_differs_from_hc0_with_repeats():
    rng = np.random.default_rng(9)
    panels = {}
    for w in (4, 5):
        panels[w] = (
            absorbing([1 if u < 0.4 else None for u in rng.uniform(size=10)]),
            absorbing([1 if u < 0.2 else None for u in rng.uniform(size=30)]),
        )
    # same comparison ids in both strata: clustering must merge their scores
    strata = {}
    dtp = {}
    for w, (td, cd) in panels.items():
        p = panel_from_dead(td, cd, w=w)
        s = p.strata[w]
        s.treated_ids = [f"T{w}_{i}" for i in range(len(s.treated_ids))]
        strata[w] = s
        dtp.update({pid: w for pid in s.treated_ids})
    panel = OutcomePanel(strata=strata, horizons=dict(HORIZONS), treated_dtp=dtp)
    plain = wls_atet(panel, "DEAD", 3)
    clustered = wls_atet(panel, "DEAD", 3, cluster=True)
    assert plain.beta == pytest.approx(clustered.beta)
    assert plain.se != clustered.se


# ---------------------------------------------------------------------------
# outcome derivation


def test_derive_outcomes_clock_and_masking():
    dx = date(2009, 1, 15)
    w = 4
    treated = make_patient(
        "T1",
        dx=dx,
        prescriptions=[rx(dx, w * 30 - 15, atc="L02BX03")],
        death=dx + timedelta(days=(w + 2) * 30 + 5),  # death month w+2
    )
    comparison = make_patient("C1", dx=dx)
    reg = Registry(patients={"T1": treated, "C1": comparison})
    cohorts = (
        [CohortAssignment("T1", "treated", dtp_months=w)],
        [CohortAssignment("C1", "comparison")],
    )
    panel = derive_outcomes(reg, cohorts, {w: {"C1": 1.0}})
    s = panel.strata[w]
    # death in month w+2 is outcome period 3
    assert list(s.treated["DEAD"][0][:4]) == [0.0, 0.0, 1.0, 1.0]
    assert np.isnan(s.treated["PAIN"][0][2])  # masked from the death period
    assert not np.isnan(s.treated["PAIN"][0][1])
    assert (s.comparison["DEAD"][0] == 0).all()
    with pytest.raises(ValueError):
        panel.check_month("DEAD", 25)


def test_derive_outcomes_rejects_dead_comparison():
    dx = date(2009, 1, 15)
    treated = make_patient("T1", dx=dx, prescriptions=[rx(dx, 290, atc="L02BX03")])
    dead = make_patient("C1", dx=dx, death=dx + timedelta(days=30))
    reg = Registry(patients={"T1": treated, "C1": dead})
    cohorts = (
        [CohortAssignment("T1", "treated", dtp_months=10)],
        [CohortAssignment("C1", "comparison")],
    )
    with pytest.raises(ValueError):
        derive_outcomes(reg, cohorts, {10: {"C1": 1.0}})


def test_uniform_weights_reproduce_unweighted_mean():
    from histcontrol.simulate import ScenarioConfig, generate

    cfg = ScenarioConfig(n_treated_target=20, n_comparison_target=120, seed=17)
    reg, cohorts, _ = generate(cfg)
    strata = sorted({a.dtp_months for a in cohorts[0]})
    weights = uniform_stratum_weights(reg, cohorts, strata)
    for w, mapping in weights.items():
        values = np.array(list(mapping.values()))
        n_t = sum(1 for a in cohorts[0] if a.dtp_months == w)
        assert np.allclose(values, n_t / len(values))
        assert values.sum() == pytest.approx(n_t)


# ---------------------------------------------------------------------------
# multiplicity, bounds, subgroups


def test_bonferroni_threshold_exact():
    threshold, decisions = bonferroni([0.01, 0.0166667, 0.02])
    assert threshold == 0.05 / 3
    assert round(threshold, 7) == 0.0166667
    # strict inequality: a p-value exactly at the threshold is not rejected
    t2, d2 = bonferroni([0.05 / 3], family_size=3)
    assert d2 == [False]
    assert decisions == [True, False, False]
    with pytest.raises(ValueError):
        bonferroni([0.01], family_size=0)


def test_bounds_bracket_complete_case():
    rng = np.random.default_rng(4)
    # differential mortality: treated die more
    treated_dead = absorbing(
        [rng.integers(1, 25) if u < 0.5 else None for u in rng.uniform(size=60)]
    )
    comparison_dead = absorbing(
        [rng.integers(1, 25) if u < 0.25 else None for u in rng.uniform(size=200)]
    )
    panel = panel_from_dead(treated_dead, comparison_dead)
    for outcome in ("PAIN", "SRE"):
        lo, hi = morbidity_bounds(panel, outcome, 24)
        cc = wls_atet(panel, outcome, 24)
        assert lo.beta <= cc.beta <= hi.beta
        assert lo.analysis_tag == "bound_lo" and hi.analysis_tag == "bound_hi"
    with pytest.raises(ValueError):
        morbidity_bounds(panel, "DEAD", 24)


def test_bound_gap_equals_mortality_effect():
    rng = np.random.default_rng(11)
    treated_dead = absorbing(
        [rng.integers(1, 25) if u < 0.5 else None for u in rng.uniform(size=40)]
    )
    comparison_dead = absorbing(
        [rng.integers(1, 25) if u < 0.2 else None for u in rng.uniform(size=150)]
    )
    panel = panel_from_dead(treated_dead, comparison_dead)
    lo, hi = morbidity_bounds(panel, "PAIN", 24)
    mortality = wls_atet(panel, "DEAD", 24)
    # imputing 1 vs 0 for the dead shifts the contrast by the dead-share
    # difference, which is exactly the mortality effect
    assert hi.beta - lo.beta == pytest.approx(abs(mortality.beta), abs=1e-8)


def test_subgroup_split_rules():
    td_lo = absorbing([1, None, None])
    td_hi = absorbing([None, 1, None])
    cd = absorbing([None] * 10)
    p_lo = panel_from_dead(td_lo, cd, w=4)
    p_hi = panel_from_dead(td_hi, cd, w=10)
    s_hi = p_hi.strata[10]
    s_hi.treated_ids = [f"H{i}" for i in range(3)]
    panel = OutcomePanel(
        strata={4: p_lo.strata[4], 10: s_hi},
        horizons=dict(HORIZONS),
        treated_dtp={**{f"T{i}": 4 for i in range(3)}, **{f"H{i}": 10 for i in range(3)}},
    )
    lo, hi = subgroup_analysis(panel, "DEAD", 2)
    assert lo.analysis_tag == "subgroup_lo" and hi.analysis_tag == "subgroup_hi"
    # median of (4,4,4,10,10,10) = 7: the w=4 patients form the low group
    assert lo.n_obs == 3 + 10
    assert hi.n_obs == 3 + 10

    degenerate = panel_from_dead(td_lo, cd, w=4)
    with pytest.raises(ValueError):
        subgroup_analysis(degenerate, "DEAD", 2)


def test_degenerate_outcome_flagged():
    panel = panel_from_dead(absorbing([None, None]), absorbing([None] * 5))
    est = wls_atet(panel, "DEAD", 1)
    assert est.degenerate
    assert not est.significant
    assert est.beta == 0.0


def test_effect_estimate_row_and_ci():
    est = EffectEstimate(
        outcome="DEAD", month=24, beta=0.1, se=0.02, p_raw=0.001,
        p_threshold=0.05 / 3,
    )
    lo, hi = est.ci95
    assert lo == pytest.approx(0.1 - 1.96 * 0.02)
    assert hi == pytest.approx(0.1 + 1.96 * 0.02)
    assert est.significant
    row = est.as_row()
    assert set(row) >= {"outcome", "month", "beta", "se", "ci_lo", "ci_hi",
                        "p", "threshold", "significant", "analysis_tag"}


# ---------------------------------------------------------------------------
# duration model


def test_cll_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    n, k = 400, 5
    x = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = (rng.uniform(size=n) < 0.3).astype(float)
    wt = rng.uniform(0.2, 2.0, size=n)
    theta = rng.normal(scale=0.3, size=k)

    def loglik(t):
        return _cll_loglik_parts(x @ t, y, wt)[0]

    _, g_eta, _ = _cll_loglik_parts(x @ theta, y, wt)
    analytic = x.T @ g_eta
    h = 1e-6
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        fd = (loglik(theta + e) - loglik(theta - e)) / (2 * h)
        assert abs(analytic[j] - fd) <= 1e-6 * max(1.0, abs(fd))


def simulate_cll_panel(rng, n_t, n_c, tau, base_p=0.1, m=24, w=4):
    """Deaths drawn from the complementary log-log model itself."""
    eta0 = np.log(-np.log(1 - base_p))
    p_c = 1 - np.exp(-np.exp(eta0))
    p_t = 1 - np.exp(-np.exp(eta0 + tau))

    def draw(n, p):
        alive = np.ones(n, dtype=bool)
        dead = np.zeros((n, m))
        for period in range(m):
            die = alive & (rng.uniform(size=n) < p)
            dead[die, period:] = 1.0
            alive &= ~die
        return dead

    return panel_from_dead(draw(n_t, p_t), draw(n_c, p_c), w=w)


def test_cll_null_survival_and_zero_tau():
    rng = np.random.default_rng(3)
    panel = simulate_cll_panel(rng, 2500, 2500, tau=0.0)
    dead = np.vstack(
        [panel.strata[4].treated["DEAD"], panel.strata[4].comparison["DEAD"]]
    )
    surv = float((dead[:, 23] == 0).mean())
    expected = 0.9**24
    mc_se = np.sqrt(expected * (1 - expected) / 5000)
    assert abs(surv - expected) < 4 * mc_se
    fit = fit_cll(panel)
    assert fit.converged
    assert abs(fit.tau) < 3.5 * fit.se_tau
    implied = 1 - np.exp(-np.exp(fit.intercept))
    assert implied == pytest.approx(0.1, abs=0.01)


def test_cll_tau_recovery_short():
    rng = np.random.default_rng(8)
    tau = 0.5
    estimates = []
    for _ in range(20):
        panel = simulate_cll_panel(rng, 300, 600, tau=tau)
        fit = fit_cll(panel)
        estimates.append(fit.tau)
    mean = float(np.mean(estimates))
    mc_se = float(np.std(estimates, ddof=1) / np.sqrt(len(estimates)))
    assert abs(mean - tau) <= 3 * mc_se


def test_cll_separation_merges_periods():
    # nobody dies in periods 2..24: those periods separate and merge
    treated_dead = absorbing([1, 1, None, None, None] * 8)
    comparison_dead = absorbing([1, None, None, None] * 20)
    panel = panel_from_dead(treated_dead, comparison_dead)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_cll(panel)
    assert fit.merged_periods
    assert any("separated" in str(c.message) for c in caught)


def test_cll_requires_deaths_and_horizon():
    panel = panel_from_dead(absorbing([None] * 5), absorbing([None] * 10))
    with pytest.raises(ValueError):
        fit_cll(panel)
    dead_panel = panel_from_dead(absorbing([2, None]), absorbing([3, None, None]))
    with pytest.raises(ValueError):
        fit_cll(dead_panel, horizon=12)


# ---------------------------------------------------------------------------
# placebo


def placebo_setup(shift=0.0, rng=None):
    rng = rng or np.random.default_rng(7)
    treated = [CohortAssignment(f"T{i}", "treated", dtp_months=4 + (i % 3)) for i in range(30)]
    comparison = [CohortAssignment(f"C{i}", "comparison") for i in range(120)]
    weights = {
        w: {f"C{i}": 1.0 for i in range(120)}
        for w in (4, 5, 6)
    }
    pids = [a.patient_id for a in treated + comparison]
    frame = pd.DataFrame(
        {
            "psa": rng.normal(10, 2, size=len(pids)),
            "gleason": rng.normal(7, 1, size=len(pids)),
        },
        index=pids,
    )
    frame.loc[[a.patient_id for a in treated], "psa"] += shift
    return (treated, comparison), weights, frame


def test_placebo_calibrated_under_null():
    cohorts, weights, frame = placebo_setup(shift=0.0)
    result = placebo_test(cohorts, weights, frame)
    assert not result.any_rejection
    assert result.hidden_bias_warning is None
    assert result.threshold == pytest.approx(0.05 / 2)
    assert len(result.estimates) == 2
    assert all(e.analysis_tag == "placebo" for e in result.estimates)


def test_placebo_flags_hidden_bias():
    cohorts, weights, frame = placebo_setup(shift=8.0)
    result = placebo_test(cohorts, weights, frame)
    assert result.any_rejection
    assert "hidden-bias" in result.hidden_bias_warning
    assert "psa" in result.hidden_bias_warning


def test_placebo_degenerate_covariate_warns():
    cohorts, weights, frame = placebo_setup()
    frame["flat"] = 1.0
    with pytest.warns(UserWarning, match="degenerate"):
        result = placebo_test(cohorts, weights, frame)
    flat = [e for e in result.estimates if e.outcome == "flat"][0]
    assert flat.degenerate
