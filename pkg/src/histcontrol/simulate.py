"""Synthetic longitudinal registries with known ground-truth effects.

A latent monthly disease-severity process (Gaussian random walk with drift)
drives everything a real registry would record: hospital visits, metastasis
diagnoses, ADT dispensing, NAM prescription (treated era only, with hazard
increasing in severity, which is the confounding), and the three outcomes.
Potential outcome series under both arms are simulated with common random
numbers and recorded before treatment masking, so every downstream
estimator can be validated against the truth.

Time is indexed in 0-based 30-day months after diagnosis.  A patient with
duration-to-prescription w receives the NAM dispense inside month w-1
(so the whole-month count from diagnosis rounds up to w), and outcome
period m covers month w+m-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .cohorts import EligibilityConfig
from .records import (
    SES_VARIABLES,
    CohortAssignment,
    Demographics,
    InpatientVisit,
    PatientRecord,
    Prescription,
    Registry,
    RegistryError,
    SocioPanel,
)

__all__ = [
    "ProgressionParams",
    "AssignmentParams",
    "OutcomeParams",
    "TrueEffects",
    "ScenarioConfig",
    "GroundTruth",
    "generate",
    "emit_placebo_covariates",
]

OUTCOMES = ("DEAD", "PAIN", "SRE")

PROSTATE_CANCER_CODE = "C619"
VISCERAL_METS_CODE = "C783"
SKELETAL_METS_CODE = "C795"
NODE_METS_CODE = "C773"
SRE_EVENT_CODE = "M844"
ROUTINE_VISIT_CODE = "Z511"
PAIN_ATC = "N02AA01"
NAM_CODES = ("L02BX03", "L02BB04")
BICA_ATC = "L02BB03"
GNRH_CODES = ("L02AE02", "L02AE03")

# One representative ICD-10 code per chronic Elixhauser group used for
# synthetic comorbidity histories (cancer-related groups excluded).
CHRONIC_CODES = (
    "I500",  # congestive heart failure
    "I480",  # cardiac arrhythmias
    "I350",  # valvular disease
    "I260",  # pulmonary circulation
    "I700",  # peripheral vascular
    "I10",   # hypertension, uncomplicated
    "I110",  # hypertension, complicated
    "G810",  # paralysis
    "G200",  # other neurological
    "J440",  # chronic pulmonary
    "E119",  # diabetes, uncomplicated
    "E112",  # diabetes, complicated
    "E039",  # hypothyroidism
    "N189",  # renal failure
    "K703",  # liver disease
    "K259",  # peptic ulcer
    "D689",  # coagulopathy
    "E660",  # obesity
    "E440",  # weight loss
    "E870",  # fluid and electrolyte
    "D509",  # deficiency anemia
    "F102",  # alcohol abuse
    "F329",  # depression
)

_SES_FACTOR_BLOCKS = {
    # factor index -> SES base names loading on it (mirrors the usual
    # pension / social assistance / early retirement / capital / wage split)
    0: ("PrivPens", "AldPens", "SumTjp"),
    1: ("SocBidrPers", "SocBidrFam"),
    2: ("ForTid", "SocInk", "SjukRe"),
    3: ("KapInk", "DispInk", "DispInkFam"),
    4: ("LoneInk", "InkFNetto", "ArbLos"),
}


@dataclass(frozen=True)
class ProgressionParams:
    initial_mean: float = 0.0
    initial_sd: float = 1.0
    drift: float = 0.05
    volatility: float = 0.2


@dataclass(frozen=True)
class AssignmentParams:
    base_hazard: float = 0.02
    severity_coef: float = 0.8
    # "current" responds to the running mean of severity since diagnosis
    # (prescribing reacts to accumulated progression), "baseline" to the
    # severity at diagnosis only (useful for calibration studies).
    mode: str = "current"


@dataclass(frozen=True)
class OutcomeParams:
    death_log_hazard: float = -4.3
    death_severity_coef: float = 0.35
    pain_log_hazard: float = -2.9
    pain_severity_coef: float = 0.3
    sre_log_hazard: float = -3.4
    sre_severity_coef: float = 0.3
    # "log_hazard" injects effects additively inside the CLL link
    # (correctly specified); "probability" adds on the probability scale
    # (misspecified variant for robustness checks).
    effect_scale: str = "log_hazard"


@dataclass(frozen=True)
class TrueEffects:
    mortality: float = 0.0
    pain: float = 0.0
    sre: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    n_treated_target: int = 200
    n_comparison_target: int = 3000
    seed: int = 20120601
    progression: ProgressionParams = field(default_factory=ProgressionParams)
    assignment: AssignmentParams = field(default_factory=AssignmentParams)
    outcome_model: OutcomeParams = field(default_factory=OutcomeParams)
    true_effects: TrueEffects = field(default_factory=TrueEffects)
    confounding_strength: float = 1.0
    eligibility: EligibilityConfig = field(default_factory=EligibilityConfig)
    visit_log_rate: float = -1.0
    visit_severity_coef: float = 0.8
    education_missing_rate: float = 0.12

    def __post_init__(self):
        if self.n_treated_target <= 0 or self.n_comparison_target <= 0:
            raise ValueError("cohort targets must be positive")
        if self.confounding_strength < 0:
            raise ValueError("confounding_strength must be >= 0")
        if not 0 <= self.assignment.base_hazard <= 1:
            raise ValueError("assignment base hazard must be in [0, 1]")


MAX_MONTHS = 72  # longest horizon: treatment at 36 plus 36 outcome periods


@dataclass
class GroundTruth:
    """Latent paths, potential outcomes and true ATET for one generation."""

    severity: Dict[str, np.ndarray]
    treated_w: Dict[str, int]
    # outcome -> pid -> (y1, y0) arrays over outcome periods 1..36
    potential: Dict[str, Dict[str, Tuple[np.ndarray, np.ndarray]]]
    placebo: pd.DataFrame  # psa_level, gleason_score, metastasis_at_diagnosis
    config: ScenarioConfig

    def severity_at_diagnosis(self, pid: str) -> float:
        return float(self.severity[pid][0])

    def true_atet(self, outcome: str, month: int) -> float:
        """Mean Y(1) - Y(0) over treated patients at outcome period `month`."""
        table = self.potential[outcome]
        diffs = [y1[month - 1] - y0[month - 1] for y1, y0 in table.values()]
        return float(np.mean(diffs))

    def true_atet_table(self) -> dict:
        return {
            outcome: {m: self.true_atet(outcome, m) for m in range(1, 37)}
            for outcome in OUTCOMES
        }

    def patient_rows(self):
        for pid, path in self.severity.items():
            row = {
                "patient_id": pid,
                "severity": [round(float(v), 6) for v in path],
            }
            if pid in self.treated_w:
                row["w"] = self.treated_w[pid]
                for outcome in OUTCOMES:
                    y1, y0 = self.potential[outcome][pid]
                    row[f"{outcome.lower()}_y1"] = y1.astype(int).tolist()
                    row[f"{outcome.lower()}_y0"] = y0.astype(int).tolist()
            if pid in self.placebo.index:
                row["placebo"] = {
                    k: round(float(v), 6)
                    for k, v in self.placebo.loc[pid].items()
                }
            yield row


def _cll_prob(log_hazard: np.ndarray) -> np.ndarray:
    return 1.0 - np.exp(-np.exp(log_hazard))


def _first_crossing(uniforms: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """First column index where u < p per row, or ncol if never."""
    hits = uniforms < probs
    first = np.argmax(hits, axis=1)
    never = ~hits.any(axis=1)
    first[never] = hits.shape[1]
    return first


def _random_dates(rng, lo: date, hi: date, n: int) -> List[date]:
    span = (hi - lo).days
    offsets = rng.integers(0, span + 1, size=n)
    return [lo + timedelta(days=int(d)) for d in offsets]


class _Draws:
    """All vectorized randomness for one batch of candidate patients."""

    def __init__(self, rng: np.random.Generator, cfg: ScenarioConfig, n: int):
        prog = cfg.progression
        self.n = n
        steps = rng.standard_normal((n, MAX_MONTHS)) * prog.volatility + prog.drift
        s0 = rng.standard_normal(n) * prog.initial_sd + prog.initial_mean
        self.severity = np.concatenate(
            [s0[:, None], s0[:, None] + np.cumsum(steps, axis=1)], axis=1
        )  # (n, 73)

        self.age = np.clip(
            np.round(70 + 3.0 * s0 + rng.standard_normal(n) * 7), 52, 95
        ).astype(int)
        self.partnered = rng.random(n) < 0.65
        self.nordic = rng.random(n) < 0.95

        # SES panel from an exact 5-factor structure (plus noise), values in
        # currency-like units; the factor engine should recover the blocks.
        self.factors = rng.standard_normal((n, 5))
        loadings = np.zeros((len(SES_VARIABLES), 5))
        uniq = np.zeros(len(SES_VARIABLES))
        for j, name in enumerate(SES_VARIABLES):
            base = name.replace("_1y", "").replace("_2y", "")
            for fac, members in _SES_FACTOR_BLOCKS.items():
                if base in members:
                    loadings[j, fac] = 0.9
            uniq[j] = 0.35
        panel_z = self.factors @ loadings.T + rng.standard_normal(
            (n, len(SES_VARIABLES))
        ) * uniq
        self.ses = 120_000 + 40_000 * panel_z

        income_z = panel_z[:, SES_VARIABLES.index("DispInk")]
        edu_latent = 0.8 * income_z + rng.standard_normal(n)
        self.education = np.select(
            [edu_latent < -0.4, edu_latent < 0.6],
            ["below_secondary", "secondary"],
            default="above_secondary",
        )
        miss_p = np.clip(
            cfg.education_missing_rate * np.exp(-0.4 * income_z), 0, 0.6
        )
        self.education_missing = rng.random(n) < miss_p

        # pre-diagnosis visits per window, rates increasing in severity
        sev_factor = np.exp(0.35 * s0)
        self.predx_counts = np.column_stack(
            [
                rng.poisson(rate * sev_factor)
                for rate in (0.4, 1.2, 0.8, 5.0)
            ]
        )
        self.chronic_n = np.minimum(rng.poisson(0.9 * sev_factor), 8)
        self.chronic_pick = rng.random((n, len(CHRONIC_CODES)))

        # post-diagnosis monthly processes, driven by severity that month
        sev = self.severity[:, :MAX_MONTHS]
        self.visit_counts = rng.poisson(
            np.exp(np.clip(cfg.visit_log_rate + cfg.visit_severity_coef * sev, -20, 3))
        )
        self.visit_day = rng.integers(0, 30, size=(n, MAX_MONTHS))
        # length of stay grows with severity, so cumulative inpatient days
        # carry progression signal beyond the visit counts
        self.visit_los = 1 + rng.poisson(np.exp(0.2 + 0.5 * np.clip(sev, -3, 3)))

        self.mets_u = rng.random((n, 3, MAX_MONTHS))
        self.bica_start_u = rng.random(n)
        self.gnrh_u = rng.random((n, MAX_MONTHS))
        self.adt_ddd = np.round(rng.uniform(60, 120, size=(n, MAX_MONTHS)), 1)

        self.death_u = rng.random((n, MAX_MONTHS))
        self.pain_u = rng.random((n, MAX_MONTHS))
        self.sre_u = rng.random((n, MAX_MONTHS))
        self.assign_u = rng.random((n, 37))


def _assignment_hazard(cfg: ScenarioConfig, severity: np.ndarray) -> np.ndarray:
    """Monthly NAM hazard for months 1..36 from the severity path matrix."""
    a = cfg.assignment
    if a.mode == "baseline":
        driver = np.repeat(severity[:, :1], 36, axis=1)
    else:
        # running mean of severity over months 0..t-1 for the hazard at t
        driver = np.cumsum(severity[:, 0:36], axis=1) / np.arange(1, 37)
    raw = a.base_hazard * np.exp(
        cfg.confounding_strength * a.severity_coef * driver
    )
    return np.clip(raw, 0.0, 0.95)


def _death_probs(cfg: ScenarioConfig, sev: np.ndarray, treated: bool) -> np.ndarray:
    om = cfg.outcome_model
    base = om.death_log_hazard + om.death_severity_coef * sev
    if not treated:
        return _cll_prob(base)
    if om.effect_scale == "probability":
        return np.clip(_cll_prob(base) + cfg.true_effects.mortality, 0.0, 1.0)
    return _cll_prob(base + cfg.true_effects.mortality)


def _morbidity_probs(
    cfg: ScenarioConfig, sev: np.ndarray, outcome: str, treated: bool
) -> np.ndarray:
    om = cfg.outcome_model
    if outcome == "PAIN":
        base = om.pain_log_hazard + om.pain_severity_coef * sev
        effect = cfg.true_effects.pain
    else:
        base = om.sre_log_hazard + om.sre_severity_coef * sev
        effect = cfg.true_effects.sre
    if not treated:
        return _cll_prob(base)
    if om.effect_scale == "probability":
        return np.clip(_cll_prob(base) + effect, 0.0, 1.0)
    return _cll_prob(base + effect)


def _build_record(
    pid: str,
    dx: date,
    idx: int,
    draws: _Draws,
    cfg: ScenarioConfig,
    death_month: Optional[int],
    trajectory_months: int,
    pain_months: np.ndarray,
    sre_months: np.ndarray,
    nam_month: Optional[int] = None,
) -> PatientRecord:
    """Materialize one PatientRecord from the vectorized draws."""
    visits: List[InpatientVisit] = []
    prescriptions: List[Prescription] = []

    chronic = [
        CHRONIC_CODES[j]
        for j in np.argsort(draws.chronic_pick[idx], kind="stable")[
            : draws.chronic_n[idx]
        ]
    ]

    # pre-diagnosis visits carrying the chronic comorbidity codes; visit
    # days are spread evenly inside each lookback window
    windows = ((1, 30), (31, 180), (181, 360), (361, 1800))
    for count, (lo, hi) in zip(draws.predx_counts[idx], windows):
        count = int(count)
        for j in range(count):
            back = lo + (hi - lo) * (j + 1) // (count + 1)
            admission = dx - timedelta(days=int(back))
            codes = chronic if chronic else [ROUTINE_VISIT_CODE]
            visits.append(
                InpatientVisit(
                    admission_date=admission,
                    discharge_date=admission + timedelta(days=2),
                    icd10_codes=tuple(codes),
                )
            )

    # diagnosis visit
    visits.append(
        InpatientVisit(
            admission_date=dx,
            discharge_date=dx + timedelta(days=2),
            icd10_codes=tuple([PROSTATE_CANCER_CODE] + chronic[:2]),
        )
    )

    # metastasis onsets: node / visceral / skeletal, hazard rising with
    # severity; the onset creates a dedicated visit in that month
    sev = draws.severity[idx, :MAX_MONTHS]
    onset_probs = np.stack(
        [
            _cll_prob(-4.8 + 0.9 * sev),
            _cll_prob(-5.1 + 0.9 * sev),
            _cll_prob(-3.9 + 1.0 * sev),
        ]
    )
    onsets = _first_crossing(draws.mets_u[idx], onset_probs)
    mets_codes = (NODE_METS_CODE, VISCERAL_METS_CODE, SKELETAL_METS_CODE)

    # no registry events are generated after the observed death month
    horizon = trajectory_months
    if death_month is not None:
        horizon = min(horizon, death_month)
    for onset, code in zip(onsets, mets_codes):
        if onset < horizon:
            admission = dx + timedelta(days=int(onset) * 30 + int(draws.visit_day[idx, onset]))
            visits.append(
                InpatientVisit(
                    admission_date=admission,
                    discharge_date=admission + timedelta(days=3),
                    icd10_codes=(code,),
                )
            )

    # routine monthly visits, one record per admission
    for t in range(horizon):
        count = int(draws.visit_counts[idx, t])
        if count == 0:
            continue
        codes = [ROUTINE_VISIT_CODE]
        codes += [c for onset, c in zip(onsets, mets_codes) if onset <= t]
        if chronic:
            codes.append(chronic[0])
        codes = tuple(codes)
        base_day = int(draws.visit_day[idx, t])
        los = int(draws.visit_los[idx, t])
        for k in range(min(count, 8)):
            admission = dx + timedelta(days=t * 30 + (base_day + 4 * k) % 30)
            visits.append(
                InpatientVisit(
                    admission_date=admission,
                    discharge_date=admission + timedelta(days=los),
                    icd10_codes=codes,
                )
            )

    # ADT dispensing: bicalutamide from early on for most patients, GnRH
    # started with severity-dependent hazard; monthly refills
    bica_start = 0 if draws.bica_start_u[idx] < 0.8 else MAX_MONTHS
    gnrh_probs = np.clip(0.03 * np.exp(0.8 * sev), 0, 0.9)
    gnrh_start = int(_first_crossing(draws.gnrh_u[idx][None, :], gnrh_probs[None, :])[0])
    gnrh_code = GNRH_CODES[idx % len(GNRH_CODES)]
    for t in range(horizon):
        day = dx + timedelta(days=t * 30 + 7)
        if t >= bica_start:
            prescriptions.append(
                Prescription(
                    dispense_date=day,
                    atc_code=BICA_ATC,
                    ddd_count=float(draws.adt_ddd[idx, t]),
                )
            )
        if t >= gnrh_start:
            prescriptions.append(
                Prescription(
                    dispense_date=day + timedelta(days=2),
                    atc_code=gnrh_code,
                    ddd_count=30.0,
                )
            )

    # NAM dispense inside month w-1 so the whole-month DTP equals w
    if nam_month is not None:
        prescriptions.append(
            Prescription(
                dispense_date=dx + timedelta(days=nam_month * 30 - 15),
                atc_code=NAM_CODES[idx % len(NAM_CODES)],
                ddd_count=30.0,
            )
        )

    # observed outcome events while alive
    for t in pain_months:
        prescriptions.append(
            Prescription(
                dispense_date=dx + timedelta(days=int(t) * 30 + 12),
                atc_code=PAIN_ATC,
                ddd_count=10.0,
            )
        )
    for t in sre_months:
        admission = dx + timedelta(days=int(t) * 30 + 10)
        visits.append(
            InpatientVisit(
                admission_date=admission,
                discharge_date=admission + timedelta(days=4),
                icd10_codes=(SRE_EVENT_CODE,),
            )
        )

    death_date = (
        dx + timedelta(days=death_month * 30 + 15) if death_month is not None else None
    )

    ses_values = {
        name: float(draws.ses[idx, j]) for j, name in enumerate(SES_VARIABLES)
    }
    education = None if draws.education_missing[idx] else str(draws.education[idx])
    demo = Demographics(
        birth_year=dx.year - int(draws.age[idx]),
        marital="partnered" if draws.partnered[idx] else "single",
        nordic_born=bool(draws.nordic[idx]),
        education=education,
    )
    return PatientRecord(
        patient_id=pid,
        diagnosis_date=dx,
        demographics=demo,
        ses_panel=SocioPanel(ses_values),
        visits=tuple(visits),
        prescriptions=tuple(prescriptions),
        death_date=death_date,
    )


def generate(
    cfg: ScenarioConfig,
) -> Tuple[Registry, Tuple[List[CohortAssignment], List[CohortAssignment]], GroundTruth]:
    """Generate a confounded registry with cohorts and ground truth.

    Deterministic given ``cfg.seed``: the master generator is consumed in a
    fixed documented order, so two calls with the same config produce
    bit-identical registries.
    """
    if cfg.assignment.base_hazard == 0 and cfg.n_treated_target > 0:
        raise RegistryError("infeasible targets: assignment hazard is zero")

    rng = np.random.Generator(np.random.Philox(cfg.seed))

    records: Dict[str, PatientRecord] = {}
    treated_assign: List[CohortAssignment] = []
    comparison_assign: List[CohortAssignment] = []
    severity: Dict[str, np.ndarray] = {}
    treated_w: Dict[str, int] = {}
    potential: Dict[str, Dict[str, Tuple[np.ndarray, np.ndarray]]] = {
        o: {} for o in OUTCOMES
    }
    placebo_rows: Dict[str, dict] = {}

    # ---- treated era: simulate candidate pools until the target is met ----
    kept = 0
    attempts = 0
    serial = 0
    while kept < cfg.n_treated_target:
        attempts += 1
        if attempts > 40:
            raise RegistryError(
                "infeasible targets: assignment process yields too few treated"
            )
        chunk = max(2 * (cfg.n_treated_target - kept) + 64, 256)
        draws = _Draws(rng, cfg, chunk)
        dx_dates = _random_dates(
            rng, cfg.eligibility.treated_window[0], cfg.eligibility.treated_window[1], chunk
        )
        hazards = _assignment_hazard(cfg, draws.severity)
        w_all = _first_crossing(draws.assign_u[:, 1:], hazards) + 1  # months 1..36

        sev = draws.severity[:, :MAX_MONTHS]
        p_dead0 = _death_probs(cfg, sev, treated=False)
        p_dead1 = _death_probs(cfg, sev, treated=True)

        for i in range(chunk):
            if kept >= cfg.n_treated_target:
                break
            w = int(w_all[i])
            if w > 36:
                continue
            # death before the treatment month (under the shared pre-NAM path)
            pre = np.flatnonzero(draws.death_u[i, 1:w] < p_dead0[i, 1:w])
            if pre.size:
                continue

            pid = f"T{serial:06d}"
            serial += 1
            kept += 1

            # potential death months under each arm, effect active from month w
            post = np.arange(w, MAX_MONTHS)
            hit1 = draws.death_u[i, post] < p_dead1[i, post]
            hit0 = draws.death_u[i, post] < p_dead0[i, post]
            t1 = int(post[np.argmax(hit1)]) if hit1.any() else MAX_MONTHS
            t0 = int(post[np.argmax(hit0)]) if hit0.any() else MAX_MONTHS
            months = np.arange(1, 37)
            dead_y1 = (t1 - w + 1 <= months).astype(float)
            dead_y0 = (t0 - w + 1 <= months).astype(float)

            morb: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
            for outcome, u in (("PAIN", draws.pain_u[i]), ("SRE", draws.sre_u[i])):
                p1 = _morbidity_probs(cfg, sev[i], outcome, treated=True)
                p0 = _morbidity_probs(cfg, sev[i], outcome, treated=False)
                idx36 = np.arange(w, w + 36)
                idx36 = idx36[idx36 < MAX_MONTHS]
                y1 = np.zeros(36)
                y0 = np.zeros(36)
                y1[: idx36.size] = (u[idx36] < p1[idx36]).astype(float)
                y0[: idx36.size] = (u[idx36] < p0[idx36]).astype(float)
                morb[outcome] = (y1, y0)

            potential["DEAD"][pid] = (dead_y1, dead_y0)
            potential["PAIN"][pid] = morb["PAIN"]
            potential["SRE"][pid] = morb["SRE"]
            treated_w[pid] = w
            severity[pid] = draws.severity[i]

            death_month = t1 if t1 < MAX_MONTHS else None
            alive_until = t1  # observed arm is treated
            pain_obs = np.flatnonzero(
                (draws.pain_u[i] < _morbidity_probs(cfg, sev[i], "PAIN", True))
                & (np.arange(MAX_MONTHS) >= w)
                & (np.arange(MAX_MONTHS) < alive_until)
            )
            sre_obs = np.flatnonzero(
                (draws.sre_u[i] < _morbidity_probs(cfg, sev[i], "SRE", True))
                & (np.arange(MAX_MONTHS) >= w)
                & (np.arange(MAX_MONTHS) < alive_until)
            )
            records[pid] = _build_record(
                pid,
                dx_dates[i],
                i,
                draws,
                cfg,
                death_month=death_month,
                trajectory_months=w,
                pain_months=pain_obs,
                sre_months=sre_obs,
                nam_month=w,
            )
            treated_assign.append(
                CohortAssignment(patient_id=pid, arm="treated", dtp_months=w)
            )

    # ---- comparison era ----
    n_c = cfg.n_comparison_target
    draws = _Draws(rng, cfg, n_c)
    dx_dates = _random_dates(
        rng,
        cfg.eligibility.comparison_window[0],
        cfg.eligibility.comparison_window[1],
        n_c,
    )
    sev = draws.severity[:, :MAX_MONTHS]
    p_dead0 = _death_probs(cfg, sev, treated=False)
    death_all = _first_crossing(draws.death_u[:, 1:], p_dead0[:, 1:]) + 1
    pain_hits = draws.pain_u < _morbidity_probs(cfg, sev, "PAIN", False)
    sre_hits = draws.sre_u < _morbidity_probs(cfg, sev, "SRE", False)

    for i in range(n_c):
        pid = f"C{i:06d}"
        t_death = int(death_all[i])
        death_month = t_death if t_death < MAX_MONTHS else None
        alive_until = t_death
        months = np.arange(MAX_MONTHS)
        pain_obs = np.flatnonzero(pain_hits[i] & (months >= 1) & (months < alive_until))
        sre_obs = np.flatnonzero(sre_hits[i] & (months >= 1) & (months < alive_until))
        records[pid] = _build_record(
            pid,
            dx_dates[i],
            i,
            draws,
            cfg,
            death_month=death_month,
            trajectory_months=min(36, MAX_MONTHS),
            pain_months=pain_obs,
            sre_months=sre_obs,
            nam_month=None,
        )
        severity[pid] = draws.severity[i]
        comparison_assign.append(CohortAssignment(patient_id=pid, arm="comparison"))

    # ---- placebo covariates: linear in severity at diagnosis plus noise ----
    pids = sorted(severity.keys())
    s0 = np.array([severity[p][0] for p in pids])
    noise = rng.standard_normal((len(pids), 2))
    met_u = rng.random(len(pids))
    placebo = pd.DataFrame(
        {
            "psa_level": 10.0 + 6.0 * s0 + 3.0 * noise[:, 0],
            "gleason_score": 7.0 + 0.9 * s0 + 0.8 * noise[:, 1],
            "metastasis_at_diagnosis": (
                met_u < np.clip(0.3 + 0.08 * s0, 0.0, 1.0)
            ).astype(float),
        },
        index=pids,
    )

    truth = GroundTruth(
        severity=severity,
        treated_w=treated_w,
        potential=potential,
        placebo=placebo,
        config=cfg,
    )
    registry = Registry(records)
    return registry, (treated_assign, comparison_assign), truth


def emit_placebo_covariates(registry: Registry, truth: GroundTruth) -> pd.DataFrame:
    """Per-patient pre-treatment placebo covariates (PSA, Gleason, metastasis).

    Deterministic functions of latent severity at diagnosis plus seeded
    noise; confounders by construction whenever the scenario's confounding
    strength is positive.
    """
    pids = [pid for pid in truth.placebo.index if pid in registry]
    return truth.placebo.loc[pids].copy()
