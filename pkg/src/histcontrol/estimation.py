"""Effect estimation on stratified, weighted outcome panels.

Outcomes are binary series over 30-day periods after the (actual or
imputed) treatment month: DEAD (absorbing), PAIN (any opiate dispense in
the period) and SRE (any hospitalization with a skeleton-related ICD-10
code).  The main estimator regresses the single-period outcome on an
intercept, treatment-month fixed effects and the treatment indicator by
weighted least squares with a heteroskedasticity-robust (HC0) sandwich;
companion analyses cover Bonferroni multiplicity control, sensitivity
bounds under differential mortality, a weighted complementary log-log
duration model, a placebo test on pre-treatment covariates, and subgroup
estimates split at the median duration-to-prescription.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .records import (
    DAYS_PER_MONTH,
    CohortAssignment,
    PatientRecord,
    Registry,
    add_months,
)

__all__ = [
    "PAIN_ATC_PREFIXES",
    "SRE_ICD10_CODES",
    "OUTCOME_NAMES",
    "OutcomePanel",
    "StratumOutcomes",
    "EffectEstimate",
    "HazardFit",
    "PlaceboResult",
    "derive_outcomes",
    "uniform_stratum_weights",
    "wls_atet",
    "bonferroni",
    "morbidity_bounds",
    "fit_cll",
    "placebo_test",
    "subgroup_analysis",
]

log = logging.getLogger(__name__)

OUTCOME_NAMES = ("DEAD", "PAIN", "SRE")

# Opiates in combination with tramadol and paracetamol.
PAIN_ATC_PREFIXES = ("N02AA", "N02AX02", "N02BE01")

# Pathologic fracture / spinal cord compression diagnosis codes.
SRE_ICD10_CODES = frozenset(
    {"M485", "M495", "M844", "M907", "G550", "G834", "G952", "G958", "G959", "G992"}
)

DEFAULT_HORIZON = 24
BONFERRONI_FAMILY = 3


@dataclass(frozen=True)
class EffectEstimate:
    """One coefficient with robust SE, CI and multiplicity-adjusted decision."""

    outcome: str
    month: Optional[int]
    beta: float
    se: float
    p_raw: float
    p_threshold: float
    analysis_tag: str = "main"
    degenerate: bool = False
    n_obs: int = 0

    @property
    def ci95(self) -> Tuple[float, float]:
        return (self.beta - 1.96 * self.se, self.beta + 1.96 * self.se)

    @property
    def significant(self) -> bool:
        return (not self.degenerate) and self.p_raw < self.p_threshold

    def as_row(self) -> dict:
        lo, hi = self.ci95
        return {
            "outcome": self.outcome,
            "month": self.month if self.month is not None else "",
            "beta": self.beta,
            "se": self.se,
            "ci_lo": lo,
            "ci_hi": hi,
            "p": self.p_raw,
            "threshold": self.p_threshold,
            "significant": self.significant,
            "analysis_tag": self.analysis_tag,
        }


@dataclass
class StratumOutcomes:
    """Outcome matrices for one treatment-month stratum.

    Series hold one row per patient and one column per outcome period
    1..M; NaN marks periods where the outcome is undefined (morbidity
    after death).
    """

    w: int
    treated_ids: List[str]
    comparison_ids: List[str]
    comparison_weights: np.ndarray
    treated: Dict[str, np.ndarray]
    comparison: Dict[str, np.ndarray]


@dataclass
class OutcomePanel:
    strata: Dict[int, StratumOutcomes]
    horizons: Dict[str, int]
    treated_dtp: Dict[str, int]

    def horizon(self, outcome: str) -> int:
        return self.horizons[outcome]

    def check_month(self, outcome: str, m: int):
        h = self.horizons[outcome]
        if not 1 <= m <= h:
            raise ValueError(
                f"{outcome} requested at month {m}, availability horizon is {h}"
            )


def _event_month_flags(
    rec: PatientRecord, max_month: int
) -> Tuple[Optional[int], np.ndarray, np.ndarray]:
    """(death month, pain flags, sre flags) over 0-based 30-day months."""
    dx = rec.diagnosis_date
    death_month = None
    if rec.death_date is not None:
        death_month = (rec.death_date - dx).days // DAYS_PER_MONTH

    pain = np.zeros(max_month, dtype=bool)
    for rx in rec.prescriptions:
        if rx.atc_code.startswith(PAIN_ATC_PREFIXES):
            t = (rx.dispense_date - dx).days // DAYS_PER_MONTH
            if 0 <= t < max_month:
                pain[t] = True

    sre = np.zeros(max_month, dtype=bool)
    for visit in rec.visits:
        if any(code in SRE_ICD10_CODES for code in visit.icd10_codes):
            t = (visit.admission_date - dx).days // DAYS_PER_MONTH
            if 0 <= t < max_month:
                sre[t] = True
    return death_month, pain, sre


def _series_for(
    death_month: Optional[int],
    pain: np.ndarray,
    sre: np.ndarray,
    w: int,
    horizon: Dict[str, int],
) -> Dict[str, np.ndarray]:
    """Outcome values per period m = 1..M with the clock starting at month w.

    Period m covers 0-based month w+m-1.  DEAD is absorbing; PAIN and SRE
    are NaN from the death period onward.
    """
    out: Dict[str, np.ndarray] = {}
    death_period = None
    if death_month is not None:
        death_period = death_month - w + 1

    m_dead = horizon["DEAD"]
    months = np.arange(1, m_dead + 1)
    if death_period is None:
        out["DEAD"] = np.zeros(m_dead)
    else:
        out["DEAD"] = (months >= death_period).astype(float)

    for name, flags in (("PAIN", pain), ("SRE", sre)):
        m_h = horizon[name]
        vals = flags[w : w + m_h].astype(float)
        if vals.size < m_h:
            vals = np.pad(vals, (0, m_h - vals.size))
        if death_period is not None and death_period <= m_h:
            vals[max(death_period, 1) - 1 :] = np.nan
        out[name] = vals
    return out


def derive_outcomes(
    registry: Registry,
    cohorts: Tuple[List[CohortAssignment], List[CohortAssignment]],
    weights: Mapping[int, Mapping[str, float]],
    horizons: Optional[Dict[str, int]] = None,
) -> OutcomePanel:
    """Build the stratified outcome panel from raw registry events.

    `weights` maps stratum w to {comparison patient_id: weight}; only
    comparisons present there (the death-censored risk set for w) enter the
    stratum.  The comparison clock starts at the imputed treatment month w,
    the treated clock at the actual one.
    """
    if horizons is None:
        horizons = {name: DEFAULT_HORIZON for name in OUTCOME_NAMES}
    max_h = max(horizons.values())
    max_month = 36 + max_h + 1

    treated, comparison = cohorts
    treated_dtp = {a.patient_id: a.dtp_months for a in treated}

    flags = {}
    for a in list(treated) + list(comparison):
        flags[a.patient_id] = _event_month_flags(registry[a.patient_id], max_month)

    strata: Dict[int, StratumOutcomes] = {}
    for w in sorted(weights):
        t_ids = sorted(pid for pid, dtp in treated_dtp.items() if dtp == w)
        c_map = weights[w]
        c_ids = list(c_map.keys() if hasattr(c_map, "keys") else c_map.index)
        if not t_ids or not c_ids:
            continue
        t_series = {name: [] for name in OUTCOME_NAMES}
        for pid in t_ids:
            series = _series_for(*flags[pid], w, horizons)
            for name in OUTCOME_NAMES:
                t_series[name].append(series[name])
        c_series = {name: [] for name in OUTCOME_NAMES}
        for pid in c_ids:
            rec = registry[pid]
            if rec.dead_before(add_months(rec.diagnosis_date, w)):
                raise ValueError(
                    f"comparison {pid} dead before imputed treatment month {w}"
                )
            series = _series_for(*flags[pid], w, horizons)
            for name in OUTCOME_NAMES:
                c_series[name].append(series[name])
        strata[w] = StratumOutcomes(
            w=w,
            treated_ids=t_ids,
            comparison_ids=c_ids,
            comparison_weights=np.array([float(c_map[pid]) for pid in c_ids]),
            treated={k: np.vstack(v) for k, v in t_series.items()},
            comparison={k: np.vstack(v) for k, v in c_series.items()},
        )
    return OutcomePanel(strata=strata, horizons=dict(horizons), treated_dtp=treated_dtp)


def uniform_stratum_weights(
    registry: Registry,
    cohorts: Tuple[List[CohortAssignment], List[CohortAssignment]],
    strata: Iterable[int],
) -> Dict[int, Dict[str, float]]:
    """Equal weights per stratum summing to the treated count.

    The resulting panel reproduces the unweighted difference-in-means
    estimator; used as the no-balancing reference.
    """
    treated, comparison = cohorts
    out: Dict[int, Dict[str, float]] = {}
    for w in strata:
        n_t = sum(1 for a in treated if a.dtp_months == w)
        alive = [
            a.patient_id
            for a in comparison
            if not registry[a.patient_id].dead_before(
                add_months(registry[a.patient_id].diagnosis_date, w)
            )
        ]
        if n_t == 0 or not alive:
            continue
        out[w] = {pid: n_t / len(alive) for pid in alive}
    return out


def _assemble_month(
    panel: OutcomePanel,
    outcome: str,
    m: int,
    impute_dead: Optional[float] = None,
    treated_subset: Optional[set] = None,
):
    """Long arrays (y, treat, stratum label, weight, patient id) at month m."""
    ys, ts, ws, wt, pids = [], [], [], [], []
    for w, s in panel.strata.items():
        if treated_subset is not None:
            keep = [i for i, pid in enumerate(s.treated_ids) if pid in treated_subset]
            if not keep:
                continue
            t_vals = s.treated[outcome][keep, m - 1]
            t_ids = [s.treated_ids[i] for i in keep]
        else:
            t_vals = s.treated[outcome][:, m - 1]
            t_ids = s.treated_ids
        c_vals = s.comparison[outcome][:, m - 1]

        if impute_dead is not None:
            dead_t = s.treated["DEAD"][:, m - 1] if treated_subset is None else s.treated["DEAD"][keep, m - 1]
            t_vals = np.where(np.isnan(t_vals), impute_dead * dead_t, t_vals)
            dead_c = s.comparison["DEAD"][:, m - 1]
            c_vals = np.where(np.isnan(c_vals), impute_dead * dead_c, c_vals)

        t_ok = ~np.isnan(t_vals)
        c_ok = ~np.isnan(c_vals)
        if not t_ok.any() or not c_ok.any():
            warnings.warn(f"stratum {w} has a single arm at month {m}, dropped")
            continue
        ys.append(t_vals[t_ok])
        ts.append(np.ones(t_ok.sum()))
        ws.append(np.full(t_ok.sum(), w))
        wt.append(np.ones(t_ok.sum()))
        pids.extend(pid for pid, ok in zip(t_ids, t_ok) if ok)

        ys.append(c_vals[c_ok])
        ts.append(np.zeros(c_ok.sum()))
        ws.append(np.full(c_ok.sum(), w))
        wt.append(s.comparison_weights[c_ok])
        pids.extend(pid for pid, ok in zip(s.comparison_ids, c_ok) if ok)

    if not ys:
        raise ValueError(f"no stratum with both arms at month {m}")
    return (
        np.concatenate(ys),
        np.concatenate(ts),
        np.concatenate(ws).astype(int),
        np.concatenate(wt),
        pids,
    )


def _wls_sandwich(
    y: np.ndarray,
    treat: np.ndarray,
    stratum: np.ndarray,
    weight: np.ndarray,
    cluster_ids: Optional[Sequence[str]] = None,
) -> Tuple[float, float, int]:
    """Weighted LS of y on intercept + stratum dummies + treat, robust SE.

    Returns (beta on treat, HC0 or cluster-robust SE, n observations).
    """
    levels = np.unique(stratum)
    cols = [np.ones_like(y)]
    for lev in levels[1:]:
        cols.append((stratum == lev).astype(float))
    cols.append(treat)
    x = np.column_stack(cols)

    xtw = x.T * weight
    xtwx = xtw @ x
    beta_hat = np.linalg.solve(xtwx, xtw @ y)
    resid = y - x @ beta_hat

    if cluster_ids is None:
        score = x * (weight * resid)[:, None]
        meat = score.T @ score
    else:
        frame = pd.DataFrame(x * (weight * resid)[:, None])
        frame["_g"] = list(cluster_ids)
        sums = frame.groupby("_g", sort=False).sum().to_numpy()
        meat = sums.T @ sums

    bread = np.linalg.inv(xtwx)
    cov = bread @ meat @ bread
    # guard against tiny negative diagonals from round-off
    var = max(cov[-1, -1], 0.0)
    return float(beta_hat[-1]), float(np.sqrt(var)), len(y)


def _estimate(
    y, treat, stratum, weight, pids, outcome, m, tag, cluster, p_threshold
) -> EffectEstimate:
    if np.ptp(y) == 0:
        return EffectEstimate(
            outcome=outcome,
            month=m,
            beta=0.0,
            se=0.0,
            p_raw=1.0,
            p_threshold=p_threshold,
            analysis_tag=tag,
            degenerate=True,
            n_obs=len(y),
        )
    beta, se, n = _wls_sandwich(
        y, treat, stratum, weight, cluster_ids=pids if cluster else None
    )
    if se == 0:
        p = 1.0
        degenerate = True
    else:
        p = float(2 * stats.norm.sf(abs(beta) / se))
        degenerate = False
    return EffectEstimate(
        outcome=outcome,
        month=m,
        beta=beta,
        se=se,
        p_raw=p,
        p_threshold=p_threshold,
        analysis_tag=tag,
        degenerate=degenerate,
        n_obs=n,
    )


def wls_atet(
    panel: OutcomePanel,
    outcome: str,
    m: int,
    cluster: bool = False,
    p_threshold: float = 0.05 / BONFERRONI_FAMILY,
    analysis_tag: str = "main",
) -> EffectEstimate:
    """ATET at outcome month m: WLS with treatment-month fixed effects.

    Treated carry weight 1, comparisons their stratum weight.  The SE is
    the HC0 sandwich; `cluster=True` aggregates scores by patient instead
    (comparisons appear once per stratum).
    """
    panel.check_month(outcome, m)
    y, treat, stratum, weight, pids = _assemble_month(panel, outcome, m)
    return _estimate(
        y, treat, stratum, weight, pids, outcome, m, analysis_tag, cluster, p_threshold
    )


def bonferroni(
    p_values: Sequence[float], family_size: int = BONFERRONI_FAMILY, overall: float = 0.05
) -> Tuple[float, List[bool]]:
    """Per-test threshold overall/family_size and strict-inequality decisions."""
    if family_size < 1:
        raise ValueError("family_size must be >= 1")
    threshold = overall / family_size
    return threshold, [p < threshold for p in p_values]


def morbidity_bounds(
    panel: OutcomePanel,
    outcome: str,
    m: int,
    cluster: bool = False,
    p_threshold: float = 0.05 / BONFERRONI_FAMILY,
) -> Tuple[EffectEstimate, EffectEstimate]:
    """Sensitivity bounds for PAIN/SRE under differential mortality.

    Two fits: dead patients imputed outcome 1 in one, 0 in the other.
    Which fit is the lower bound is keyed on the sign of the estimated
    mortality effect at the same month, so lower.beta <= upper.beta.
    """
    if outcome not in ("PAIN", "SRE"):
        raise ValueError("bounds are defined for morbidity outcomes only")
    panel.check_month(outcome, m)

    fits = {}
    for imputed in (0.0, 1.0):
        y, treat, stratum, weight, pids = _assemble_month(
            panel, outcome, m, impute_dead=imputed
        )
        tag = "bound_lo" if imputed == 0.0 else "bound_hi"
        fits[imputed] = _estimate(
            y, treat, stratum, weight, pids, outcome, m, tag, cluster, p_threshold
        )

    mortality = wls_atet(panel, "DEAD", min(m, panel.horizons["DEAD"]), cluster=cluster)
    if mortality.beta >= 0:
        # more treated deaths: imputing 1 inflates the treated mean more,
        # so the impute-0 fit is the lower bound on the effect scale
        lower, upper = fits[0.0], fits[1.0]
    else:
        lower, upper = fits[1.0], fits[0.0]
    lower = _retag(lower, "bound_lo")
    upper = _retag(upper, "bound_hi")
    return lower, upper


def _retag(est: EffectEstimate, tag: str) -> EffectEstimate:
    return EffectEstimate(
        outcome=est.outcome,
        month=est.month,
        beta=est.beta,
        se=est.se,
        p_raw=est.p_raw,
        p_threshold=est.p_threshold,
        analysis_tag=tag,
        degenerate=est.degenerate,
        n_obs=est.n_obs,
    )


# ---------------------------------------------------------------------------
# discrete-time duration model with complementary log-log link
# ---------------------------------------------------------------------------


@dataclass
class HazardFit:
    """Weighted ML fit of p_im = 1 - exp(-exp(gamma_m + alpha_t + tau T))."""

    gamma: Dict[int, float]  # per outcome period (period 1 absorbed in intercept)
    alpha: Dict[int, float]  # per treatment-month stratum (first level dropped)
    intercept: float
    tau: float
    se_tau: float
    loglik: float
    gradient_norm: float
    converged: bool
    iterations: int
    merged_periods: List[Tuple[int, int]] = field(default_factory=list)


def _cll_loglik_parts(eta: np.ndarray, y: np.ndarray, w: np.ndarray):
    eta = np.clip(eta, -30.0, 3.5)
    u = np.exp(eta)
    s = np.exp(-u)
    p = -np.expm1(-u)  # 1 - exp(-u), accurate for small u
    p = np.clip(p, 1e-300, 1.0)
    ll = np.sum(w * np.where(y == 1, np.log(p), -u))
    # d/deta and d2/deta2 of the per-observation log-likelihood
    grad = np.where(y == 1, u * s / p, -u)
    curv = np.where(y == 1, u * s * (p - u) / p**2, -u)
    return ll, w * grad, w * curv


def _person_periods(panel: OutcomePanel, horizon: int):
    """Expand the DEAD series into person-period rows (exit after death)."""
    rows_y, rows_m, rows_w, rows_t, rows_wt, rows_pid = [], [], [], [], [], []
    for w, s in panel.strata.items():
        for arm, mat, ids, wts in (
            (1, s.treated["DEAD"], s.treated_ids, np.ones(len(s.treated_ids))),
            (0, s.comparison["DEAD"], s.comparison_ids, s.comparison_weights),
        ):
            for i, pid in enumerate(ids):
                series = mat[i, :horizon]
                death = np.flatnonzero(series == 1)
                last = int(death[0]) + 1 if death.size else horizon
                for m in range(1, last + 1):
                    rows_y.append(series[m - 1])
                    rows_m.append(m)
                    rows_w.append(w)
                    rows_t.append(arm)
                    rows_wt.append(wts[i])
                    rows_pid.append(pid)
    return (
        np.array(rows_y),
        np.array(rows_m),
        np.array(rows_w),
        np.array(rows_t, dtype=float),
        np.array(rows_wt),
        rows_pid,
    )


def _merge_separated_periods(y, m, wt, horizon):
    """Map periods with all-event or no-event risk sets onto a neighbor.

    Returns (period group per row, merge list); group 1 is the reference
    absorbed in the intercept.
    """
    group = {p: p for p in range(1, horizon + 1)}
    merged = []
    changed = True
    while changed:
        changed = False
        labels = np.array([group[p] for p in m])
        for g in sorted(set(group.values())):
            mask = labels == g
            if not mask.any():
                continue
            total = wt[mask].sum()
            events = (wt[mask] * y[mask]).sum()
            if total > 0 and (events == 0 or events == total):
                neighbors = [v for v in sorted(set(group.values())) if v != g]
                if not neighbors:
                    break
                target = max([v for v in neighbors if v < g], default=min(neighbors))
                for p, v in group.items():
                    if v == g:
                        group[p] = target
                merged.append((g, target))
                warnings.warn(
                    f"duration model: period {g} separated, merged into {target}"
                )
                changed = True
                break
    return np.array([group[p] for p in m]), merged


def fit_cll(
    panel: OutcomePanel,
    horizon: int = DEFAULT_HORIZON,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> HazardFit:
    """Weighted ML for the discrete-time mortality model, Newton iterations.

    Identification: the period-1 baseline is absorbed in the intercept and
    the first treatment-month level is dropped.  Separated periods (no
    events or all events) are merged with a neighbor and reported.
    """
    if horizon < 24:
        raise ValueError("duration-model horizon must be >= 24")
    panel.check_month("DEAD", horizon)
    y, m, w_strat, treat, wt, pids = _person_periods(panel, horizon)
    if not (y == 1).any():
        raise ValueError("duration model requires at least one death")

    m_group, merged = _merge_separated_periods(y, m, wt, horizon)

    period_levels = sorted(set(m_group))
    strat_levels = sorted(set(w_strat))
    cols = [np.ones_like(y, dtype=float)]
    names: List[Tuple[str, int]] = [("intercept", 0)]
    for lev in period_levels[1:]:
        cols.append((m_group == lev).astype(float))
        names.append(("gamma", lev))
    for lev in strat_levels[1:]:
        cols.append((w_strat == lev).astype(float))
        names.append(("alpha", lev))
    cols.append(treat)
    names.append(("tau", 0))
    x = np.column_stack(cols)
    k = x.shape[1]

    theta = np.zeros(k)
    # sensible intercept start: overall weighted event rate on the cll scale
    rate = float(np.clip((wt * y).sum() / wt.sum(), 1e-6, 1 - 1e-6))
    theta[0] = np.log(-np.log1p(-rate))

    ll, g_eta, c_eta = _cll_loglik_parts(x @ theta, y, wt)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad = x.T @ g_eta
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            converged = True
            break
        hess = (x.T * c_eta) @ x
        try:
            step = np.linalg.solve(hess - 1e-10 * np.eye(k), grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(60):
            ll_new, g_new, c_new = _cll_loglik_parts(x @ (theta - scale * step), y, wt)
            if ll_new >= ll:
                break
            scale *= 0.5
        theta = theta - scale * step
        ll, g_eta, c_eta = ll_new, g_new, c_new

    grad = x.T @ g_eta
    gnorm = float(np.max(np.abs(grad)))
    if gnorm <= tol:
        converged = True
    if not converged:
        log.warning("duration model did not converge: gradient norm %.3g", gnorm)

    # sandwich covariance with patient-level score aggregation
    hess = (x.T * c_eta) @ x
    scores = pd.DataFrame(x * g_eta[:, None])
    scores["_g"] = pids
    sums = scores.groupby("_g", sort=False).sum().to_numpy()
    bread = np.linalg.inv(-hess)
    cov = bread @ (sums.T @ sums) @ bread
    se_tau = float(np.sqrt(max(cov[-1, -1], 0.0)))

    gamma = {lev: float(theta[i]) for i, (kind, lev) in enumerate(names) if kind == "gamma"}
    alpha = {lev: float(theta[i]) for i, (kind, lev) in enumerate(names) if kind == "alpha"}
    return HazardFit(
        gamma=gamma,
        alpha=alpha,
        intercept=float(theta[0]),
        tau=float(theta[-1]),
        se_tau=se_tau,
        loglik=float(ll),
        gradient_norm=gnorm,
        converged=converged,
        iterations=iterations,
        merged_periods=merged,
    )


# ---------------------------------------------------------------------------
# placebo test and subgroups
# ---------------------------------------------------------------------------


@dataclass
class PlaceboResult:
    estimates: List[EffectEstimate]
    threshold: float
    any_rejection: bool
    hidden_bias_warning: Optional[str]


def placebo_test(
    cohorts: Tuple[List[CohortAssignment], List[CohortAssignment]],
    weights: Mapping[int, Mapping[str, float]],
    placebo: pd.DataFrame,
    overall: float = 0.05,
) -> PlaceboResult:
    """Estimate treatment 'effects' on pre-treatment covariates.

    Each placebo covariate is regressed on the treatment indicator with
    treatment-month fixed effects and the balancing weights.  Any Bonferroni
    rejection raises a hidden-bias warning, since pre-treatment covariates
    cannot be affected by treatment.  SEs are clustered by patient because
    comparisons enter once per stratum with shared covariate values.
    """
    treated, _ = cohorts
    treated_dtp = {a.patient_id: a.dtp_months for a in treated}
    missing = [pid for pid in treated_dtp if pid not in placebo.index]
    if missing:
        warnings.warn("placebo covariates missing for some patients, test skipped")
        return PlaceboResult([], overall / BONFERRONI_FAMILY, False, None)

    rows_t, rows_s, rows_wt, rows_pid = [], [], [], []
    for w in sorted(weights):
        t_ids = [pid for pid, dtp in treated_dtp.items() if dtp == w]
        c_map = weights[w]
        c_ids = list(c_map.keys() if hasattr(c_map, "keys") else c_map.index)
        if not t_ids or not c_ids:
            continue
        for pid in sorted(t_ids):
            rows_t.append(1.0)
            rows_s.append(w)
            rows_wt.append(1.0)
            rows_pid.append(pid)
        for pid in c_ids:
            rows_t.append(0.0)
            rows_s.append(w)
            rows_wt.append(float(c_map[pid]))
            rows_pid.append(pid)
    treat = np.array(rows_t)
    stratum = np.array(rows_s)
    weight = np.array(rows_wt)

    threshold, _ = bonferroni([1.0] * len(placebo.columns), family_size=len(placebo.columns), overall=overall)
    estimates = []
    for name in placebo.columns:
        values = placebo[name].reindex(rows_pid).to_numpy(dtype=float)
        est = _estimate(
            values,
            treat,
            stratum,
            weight,
            rows_pid,
            name,
            None,
            "placebo",
            cluster=True,
            p_threshold=threshold,
        )
        if est.degenerate:
            warnings.warn(f"placebo covariate {name} is degenerate (zero variance)")
        estimates.append(est)

    rejected = [e.outcome for e in estimates if e.significant]
    warning = None
    if rejected:
        warning = (
            "hidden-bias warning: placebo effects detected on "
            + ", ".join(rejected)
            + "; balance may not remove all confounding"
        )
        log.warning(warning)
    return PlaceboResult(estimates, threshold, bool(rejected), warning)


def subgroup_analysis(
    panel: OutcomePanel,
    outcome: str,
    m: int,
    quantile: float = 0.5,
    cluster: bool = False,
    p_threshold: float = 0.05 / BONFERRONI_FAMILY,
) -> Tuple[EffectEstimate, EffectEstimate]:
    """Effects for treated below vs at-or-above the median DTP.

    The split point is the `quantile` of treated DTP; ties go to the upper
    group.  Comparisons contribute through the strata containing each
    subgroup's treated patients, with their stratum weights.
    """
    panel.check_month(outcome, m)
    dtps = np.array(sorted(panel.treated_dtp.values()))
    if np.ptp(dtps) == 0:
        raise ValueError("degenerate split: all treated share one DTP")
    cut = float(np.quantile(dtps, quantile))
    lo_ids = {pid for pid, w in panel.treated_dtp.items() if w < cut}
    hi_ids = {pid for pid, w in panel.treated_dtp.items() if w >= cut}
    if not lo_ids or not hi_ids:
        raise ValueError("degenerate split: one subgroup is empty")

    results = []
    for ids, tag in ((lo_ids, "subgroup_lo"), (hi_ids, "subgroup_hi")):
        y, treat, stratum, weight, pids = _assemble_month(
            panel, outcome, m, treated_subset=ids
        )
        results.append(
            _estimate(
                y, treat, stratum, weight, pids, outcome, m, tag, cluster, p_threshold
            )
        )
    return results[0], results[1]
