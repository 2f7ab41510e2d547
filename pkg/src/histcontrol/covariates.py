"""Pre-diagnosis covariates and monthly health-progression trajectories.

Windowing conventions (30-day months, documented once here):

* visit- and prescription-based cumulative fields at trajectory month ``t``
  (``cum_visits_t``, ``cum_add_ddd_t``, ``adt_status_t``,
  ``sum_inpatient_days_t``) aggregate events strictly before
  ``diagnosis + t`` months;
* diagnosis-code-based fields (``elix_score_t``, metastasis fields) include
  month ``t`` itself, i.e. aggregate codes up to ``diagnosis + (t+1)``
  months, so a metastasis coded in month 3 shows up at ``t = 3``.

Balancing at stratum ``w`` uses the trajectory vector at ``t = w - 1``, one
month before the (possibly imputed) treatment month.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from datetime import date
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .elixhauser import elixhauser, elixhauser_category, groups_for_code
from .factors import FactorModel, score_factors
from .records import (
    DAYS_PER_MONTH,
    PatientRecord,
    Registry,
    add_months,
)

__all__ = [
    "ADT_ATC_CODES",
    "BICALUTAMIDE_ATC",
    "GNRH_ATC_CODES",
    "PreDiagnosisCovariates",
    "TrajectoryVector",
    "visit_windows",
    "impute_education",
    "impute_education_all",
    "TrajectoryPanel",
    "adt_cumulative_ddd",
    "adt_status",
    "build_trajectory",
    "build_prediagnosis",
    "prediagnosis_frame",
    "trajectory_frame",
    "ses_matrix",
]

BICALUTAMIDE_ATC = "L02BB03"
GNRH_ATC_CODES = frozenset({"L02BX02", "L02AE01", "L02AE02", "L02AE03", "L02AE04"})
ADT_ATC_CODES = frozenset({BICALUTAMIDE_ATC}) | GNRH_ATC_CODES

# ICD-10 metastasis families: C78 visceral, C79 skeletal (C795 is bone),
# C77 lymph nodes (counts only toward presence of any metastasis).
VISCERAL_METS_PREFIX = "C78"
SKELETAL_METS_PREFIX = "C79"
ANY_METS_PREFIXES = ("C77", "C78", "C79")

EDUCATION_ORDER = ("below_secondary", "secondary", "above_secondary")

ADT_STATUS_LEVELS = ("neither", "bicalutamide_only", "bica_plus_gnrh")


@dataclass(frozen=True)
class PreDiagnosisCovariates:
    age_at_diagnosis: float
    visits_1m: int
    visits_1_6m: int
    visits_6_12m: int
    visits_1_60m: int
    elix_at_dx_cat: str
    elix_12m_cat: str
    edu_below: bool
    edu_secondary: bool
    partnered: bool
    nordic_born: bool
    factor_scores: Tuple[float, ...]


@dataclass(frozen=True)
class TrajectoryVector:
    month: int
    elix_score: int
    cum_visits: int
    months_visceral_mets: int
    months_skeletal_mets: int
    any_mets: bool
    cum_add_ddd: float
    adt_status: str
    sum_inpatient_days: int


def visit_windows(visits, diagnosis_date: date) -> Tuple[int, int, int, int]:
    """Admission counts in the 1, 1-6, 6-12 and 1-60 month pre-diagnosis
    windows; each window is half-open on the far side, months are 30 days."""
    v1m = v1_6m = v6_12m = v1_60m = 0
    for visit in visits:
        back = (diagnosis_date - visit.admission_date).days
        if back < 0:
            continue
        if back <= 30:
            v1m += 1
        elif back <= 180:
            v1_6m += 1
        elif back <= 360:
            v6_12m += 1
        if 30 < back <= 1800:
            v1_60m += 1
    return v1m, v1_6m, v6_12m, v1_60m


def _education_rank(level: str) -> int:
    return EDUCATION_ORDER.index(level)


def _edu_distance_features(rec: PatientRecord) -> List[float]:
    values = rec.ses_panel.values
    return [
        values.get("DispInk") if values.get("DispInk") is not None else np.nan,
        values.get("AldPens") if values.get("AldPens") is not None else np.nan,
        float(rec.age_at_diagnosis),
        1.0 if rec.demographics.nordic_born else 0.0,
    ]


def _vote(levels: Sequence[str]) -> str:
    votes = Counter(levels)
    best = max(votes.values())
    tied = [level for level, n in votes.items() if n == best]
    return min(tied, key=_education_rank)


def impute_education(
    target: PatientRecord,
    donors: Sequence[PatientRecord],
    k: int = 5,
) -> str:
    """Impute a missing education level from the k nearest donors.

    Distance is standardized Euclidean over (disposable income, old-age
    pension, age at diagnosis, Nordic-born), standardized by donor-pool
    moments.  Ties in the donor mode break toward the lower level.
    """
    if target.demographics.education is not None:
        raise ValueError("target education is not missing")
    pool = [d for d in donors if d.demographics.education is not None]
    if len(pool) < k:
        raise ValueError("insufficient donors")

    donor_x = np.array([_edu_distance_features(d) for d in pool], dtype=float)
    means = np.nanmean(donor_x, axis=0)
    sds = np.nanstd(donor_x, axis=0)
    sds[sds == 0] = 1.0

    z_donors = np.nan_to_num((donor_x - means) / sds)
    z_target = np.nan_to_num(
        (np.array(_edu_distance_features(target), dtype=float) - means) / sds
    )
    dist = np.linalg.norm(z_donors - z_target, axis=1)
    nearest = np.argsort(dist, kind="stable")[:k]
    return _vote([pool[i].demographics.education for i in nearest])


def impute_education_all(
    registry: Registry, ids: Optional[Sequence[str]] = None, k: int = 5
) -> Dict[str, str]:
    """Impute every missing education level in one pass.

    Same donor pool, distance and tie-break as :func:`impute_education`,
    with the donor matrix built once.  Returns {patient_id: level} for the
    patients whose education was missing.
    """
    if ids is None:
        ids = sorted(registry.patients)
    donor_ids = [p for p in ids if registry[p].demographics.education is not None]
    target_ids = [p for p in ids if registry[p].demographics.education is None]
    if not target_ids:
        return {}
    if len(donor_ids) < k:
        raise ValueError("insufficient donors")

    donor_x = np.array(
        [_edu_distance_features(registry[p]) for p in donor_ids], dtype=float
    )
    levels = np.array([registry[p].demographics.education for p in donor_ids])
    means = np.nanmean(donor_x, axis=0)
    sds = np.nanstd(donor_x, axis=0)
    sds[sds == 0] = 1.0
    z_donors = np.nan_to_num((donor_x - means) / sds)

    target_x = np.array(
        [_edu_distance_features(registry[p]) for p in target_ids], dtype=float
    )
    z_targets = np.nan_to_num((target_x - means) / sds)

    out: Dict[str, str] = {}
    for pid, z in zip(target_ids, z_targets):
        dist = np.linalg.norm(z_donors - z, axis=1)
        nearest = np.argsort(dist, kind="stable")[:k]
        out[pid] = _vote(list(levels[nearest]))
    return out


def adt_cumulative_ddd(prescriptions, diagnosis_date: date, t: int) -> float:
    """Defined daily doses of ADT dispensed in [diagnosis, diagnosis + t months)."""
    if not 0 <= t <= 36:
        raise ValueError(f"t out of range: {t}")
    cutoff = add_months(diagnosis_date, t)
    total = 0.0
    for rx in prescriptions:
        if rx.atc_code in ADT_ATC_CODES and diagnosis_date <= rx.dispense_date < cutoff:
            total += rx.ddd_count
    return total


def adt_status(prescriptions, diagnosis_date: date, t: int) -> str:
    """ADT exposure class over dispenses before diagnosis + t months.

    ``bicalutamide_only`` and ``bica_plus_gnrh`` are the protocol's two
    indicator cases; anything else (no ADT, or GnRH without bicalutamide)
    falls in the extension category ``neither``.
    """
    if not 0 <= t <= 36:
        raise ValueError(f"t out of range: {t}")
    cutoff = add_months(diagnosis_date, t)
    has_bica = False
    has_gnrh = False
    for rx in prescriptions:
        if diagnosis_date <= rx.dispense_date < cutoff:
            if rx.atc_code == BICALUTAMIDE_ATC:
                has_bica = True
            elif rx.atc_code in GNRH_ATC_CODES:
                has_gnrh = True
    if has_bica and has_gnrh:
        return "bica_plus_gnrh"
    if has_bica:
        return "bicalutamide_only"
    return "neither"


def _visit_month(visit, diagnosis_date: date) -> int:
    return (visit.admission_date - diagnosis_date).days // DAYS_PER_MONTH


def build_trajectory(patient: PatientRecord, w: int) -> List[TrajectoryVector]:
    """Monthly trajectory vectors for t = 0..w-1.

    The patient must be alive through month w-1; a death inside the window
    truncates the trajectory and is an error for the caller to handle.
    """
    if not 1 <= w <= 36:
        raise ValueError(f"w out of range: {w}")
    if patient.dead_before(add_months(patient.diagnosis_date, w)):
        raise ValueError("trajectory truncated by death")

    dx = patient.diagnosis_date

    # Post-diagnosis visits binned by 30-day month.
    visit_counts = np.zeros(w + 1, dtype=int)
    stay_days = np.zeros(w + 1, dtype=int)
    visceral_onset: Optional[int] = None
    skeletal_onset: Optional[int] = None
    any_onset: Optional[int] = None
    codes_by_month: Dict[int, set] = {}
    for visit in patient.visits:
        m = _visit_month(visit, dx)
        if m < 0:
            continue
        if m <= w:
            visit_counts[m] += 1
            stay_days[m] += (visit.discharge_date - visit.admission_date).days
        if m <= w - 1:
            codes_by_month.setdefault(m, set()).update(visit.icd10_codes)
            for code in visit.icd10_codes:
                if code.startswith(VISCERAL_METS_PREFIX):
                    visceral_onset = m if visceral_onset is None else min(visceral_onset, m)
                if code.startswith(SKELETAL_METS_PREFIX):
                    skeletal_onset = m if skeletal_onset is None else min(skeletal_onset, m)
                if code.startswith(ANY_METS_PREFIXES):
                    any_onset = m if any_onset is None else min(any_onset, m)

    out: List[TrajectoryVector] = []
    seen_codes: set = set()
    for t in range(w):
        seen_codes |= codes_by_month.get(t, set())
        elix_count, _ = elixhauser(seen_codes)
        out.append(
            TrajectoryVector(
                month=t,
                elix_score=elix_count,
                cum_visits=int(visit_counts[:t].sum()),
                months_visceral_mets=(
                    t - visceral_onset + 1 if visceral_onset is not None and visceral_onset <= t else 0
                ),
                months_skeletal_mets=(
                    t - skeletal_onset + 1 if skeletal_onset is not None and skeletal_onset <= t else 0
                ),
                any_mets=any_onset is not None and any_onset <= t,
                cum_add_ddd=adt_cumulative_ddd(patient.prescriptions, dx, t),
                adt_status=adt_status(patient.prescriptions, dx, t),
                sum_inpatient_days=int(stay_days[:t].sum()),
            )
        )
    return out


def build_prediagnosis(
    patient: PatientRecord,
    factor_model: Optional[FactorModel] = None,
    education: Optional[str] = None,
) -> PreDiagnosisCovariates:
    """Assemble the pre-diagnosis covariate block for one patient.

    `education` supplies an imputed level when the recorded one is missing.
    Factor scores are zero when no fitted factor model is given.
    """
    dx = patient.diagnosis_date
    v1m, v1_6m, v6_12m, v1_60m = visit_windows(patient.visits, dx)

    codes_at_dx: set = set()
    codes_12m: set = set()
    for visit in patient.visits:
        if visit.admission_date <= dx:
            codes_at_dx.update(visit.icd10_codes)
        if (dx - visit.admission_date).days >= 360:
            codes_12m.update(visit.icd10_codes)
    _, cat_dx = elixhauser(codes_at_dx)
    _, cat_12m = elixhauser(codes_12m)

    edu = patient.demographics.education or education
    if edu is None:
        raise ValueError(f"education missing for {patient.patient_id} and not imputed")

    if factor_model is not None:
        row = _ses_row(patient, factor_model.variable_names)
        scores = tuple(float(s) for s in score_factors(factor_model, row))
    else:
        scores = (0.0,) * 5

    return PreDiagnosisCovariates(
        age_at_diagnosis=float(patient.age_at_diagnosis),
        visits_1m=v1m,
        visits_1_6m=v1_6m,
        visits_6_12m=v6_12m,
        visits_1_60m=v1_60m,
        elix_at_dx_cat=cat_dx,
        elix_12m_cat=cat_12m,
        edu_below=edu == "below_secondary",
        edu_secondary=edu == "secondary",
        partnered=patient.demographics.marital == "partnered",
        nordic_born=patient.demographics.nordic_born,
        factor_scores=scores,
    )


def _ses_row(patient: PatientRecord, names: Sequence[str]) -> np.ndarray:
    values = patient.ses_panel.values
    return np.array(
        [np.nan if values.get(n) is None else values.get(n) for n in names],
        dtype=float,
    )


def ses_matrix(registry: Registry, ids: Sequence[str], names: Sequence[str]) -> np.ndarray:
    """SES panel as an (n, len(names)) float matrix with NaN for missing."""
    return np.vstack([_ses_row(registry[pid], names) for pid in ids])


def _impute_ses_column_means(matrix: np.ndarray) -> np.ndarray:
    out = matrix.copy()
    means = np.nanmean(out, axis=0)
    idx = np.where(np.isnan(out))
    out[idx] = np.take(means, idx[1])
    return out


def prediagnosis_frame(
    registry: Registry,
    ids: Sequence[str],
    factor_model: Optional[FactorModel] = None,
    imputed_education: Optional[Dict[str, str]] = None,
) -> pd.DataFrame:
    """Pre-diagnosis covariates for many patients as a numeric DataFrame.

    Categorical fields are expanded to indicators; elixhauser categories
    become two dummies each (group 0 is the reference).  Missing SES values
    are column-mean imputed before factor scoring.
    """
    imputed_education = imputed_education or {}
    rows = []
    ses_rows = []
    for pid in ids:
        rec = registry[pid]
        cov = build_prediagnosis(
            rec, factor_model=None, education=imputed_education.get(pid)
        )
        rows.append(
            {
                "age_at_diagnosis": cov.age_at_diagnosis,
                "visits_1m": cov.visits_1m,
                "visits_1_6m": cov.visits_1_6m,
                "visits_6_12m": cov.visits_6_12m,
                "visits_1_60m": cov.visits_1_60m,
                "elix_dx_1_4": cov.elix_at_dx_cat == "1-4",
                "elix_dx_5plus": cov.elix_at_dx_cat == ">=5",
                "elix_12m_1_4": cov.elix_12m_cat == "1-4",
                "elix_12m_5plus": cov.elix_12m_cat == ">=5",
                "edu_below": cov.edu_below,
                "edu_secondary": cov.edu_secondary,
                "partnered": cov.partnered,
                "nordic_born": cov.nordic_born,
            }
        )
        if factor_model is not None:
            ses_rows.append(_ses_row(rec, factor_model.variable_names))

    frame = pd.DataFrame(rows, index=list(ids)).astype(float)
    if factor_model is not None:
        ses = _impute_ses_column_means(np.vstack(ses_rows))
        scores = score_factors(factor_model, ses)
        for j in range(scores.shape[1]):
            frame[f"factor_{j + 1}"] = scores[:, j]
    return frame


class TrajectoryPanel:
    """All patients' monthly trajectory fields, computed in one event pass.

    Holds one (n_patients, max_month) array per field so per-stratum
    covariate matrices are cheap slices.  Values agree with the per-patient
    :func:`build_trajectory` reference (tested against it).
    """

    FIELDS = (
        "elix_score",
        "cum_visits",
        "recent_visits",
        "months_visceral_mets",
        "months_skeletal_mets",
        "any_mets",
        "cum_add_ddd",
        "bica_only",
        "bica_plus_gnrh",
        "sum_inpatient_days",
    )

    def __init__(self, ids: Sequence[str], arrays: Dict[str, np.ndarray]):
        self.ids = list(ids)
        self.arrays = arrays
        self._row = {pid: i for i, pid in enumerate(self.ids)}

    @classmethod
    def from_registry(
        cls, registry: Registry, ids: Sequence[str], max_month: int = 36
    ) -> "TrajectoryPanel":
        n = len(ids)
        m = max_month
        arrays = {name: np.zeros((n, m)) for name in cls.FIELDS}

        for i, pid in enumerate(ids):
            rec = registry[pid]
            dx = rec.diagnosis_date

            monthly_visits = np.zeros(m, dtype=float)
            monthly_days = np.zeros(m, dtype=float)
            new_groups: Dict[int, set] = {}
            visc_onset = skel_onset = any_onset = m
            for visit in rec.visits:
                mm = _visit_month(visit, dx)
                if mm < 0 or mm >= m:
                    continue
                monthly_visits[mm] += 1
                monthly_days[mm] += (visit.discharge_date - visit.admission_date).days
                new_groups.setdefault(mm, set()).update(
                    g for c in visit.icd10_codes for g in groups_for_code(c)
                )
                for code in visit.icd10_codes:
                    if code.startswith(VISCERAL_METS_PREFIX):
                        visc_onset = min(visc_onset, mm)
                    if code.startswith(SKELETAL_METS_PREFIX):
                        skel_onset = min(skel_onset, mm)
                    if code.startswith(ANY_METS_PREFIXES):
                        any_onset = min(any_onset, mm)

            monthly_ddd = np.zeros(m, dtype=float)
            bica_first = gnrh_first = m + 1
            for rx in rec.prescriptions:
                mm = (rx.dispense_date - dx).days // DAYS_PER_MONTH
                if mm < 0 or mm >= m:
                    continue
                if rx.atc_code in ADT_ATC_CODES:
                    monthly_ddd[mm] += rx.ddd_count
                if rx.atc_code == BICALUTAMIDE_ATC:
                    bica_first = min(bica_first, mm)
                elif rx.atc_code in GNRH_ATC_CODES:
                    gnrh_first = min(gnrh_first, mm)

            t = np.arange(m)
            # cumulative-before-month-t quantities (events in months < t)
            cum_visits = np.concatenate(([0.0], np.cumsum(monthly_visits)[:-1]))
            cum_days = np.concatenate(([0.0], np.cumsum(monthly_days)[:-1]))
            cum_ddd = np.concatenate(([0.0], np.cumsum(monthly_ddd)[:-1]))
            arrays["cum_visits"][i] = cum_visits
            # visits in the three months before t, a short-horizon
            # progression signal on top of the cumulative count
            arrays["recent_visits"][i] = cum_visits - np.concatenate(
                (np.zeros(3), cum_visits[:-3])
            )
            arrays["sum_inpatient_days"][i] = cum_days
            arrays["cum_add_ddd"][i] = cum_ddd
            # month-t-inclusive diagnosis-code quantities
            arrays["months_visceral_mets"][i] = np.maximum(t - visc_onset + 1, 0)
            arrays["months_skeletal_mets"][i] = np.maximum(t - skel_onset + 1, 0)
            arrays["any_mets"][i] = (t >= any_onset).astype(float)
            seen: set = set()
            score = np.zeros(m, dtype=float)
            for mm in range(m):
                seen |= new_groups.get(mm, set())
                score[mm] = len(seen)
            arrays["elix_score"][i] = score
            # ADT status from dispenses in months < t
            has_bica = bica_first < t
            has_gnrh = gnrh_first < t
            arrays["bica_only"][i] = (has_bica & ~has_gnrh).astype(float)
            arrays["bica_plus_gnrh"][i] = (has_bica & has_gnrh).astype(float)

        return cls(ids, arrays)

    def frame_at(self, w: int, ids: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """Trajectory covariates at month t = w - 1 as a numeric DataFrame.

        Column names follow the export naming scheme: SCORE_t, VISITS_t,
        METAS_t, MEDS_DAYS_t, BIKA_ONLY_t / BIKA_GNRH_t, SUM_VIS_METAS,
        SUM_SK_METAS and SUM_DAYS.
        """
        t = w - 1
        if ids is None:
            rows = slice(None)
            index = self.ids
        else:
            rows = [self._row[pid] for pid in ids]
            index = list(ids)
        a = self.arrays
        return pd.DataFrame(
            {
                f"SCORE_{t}": a["elix_score"][rows, t],
                f"VISITS_{t}": a["cum_visits"][rows, t],
                f"VISITS_LAST3_{t}": a["recent_visits"][rows, t],
                f"METAS_{t}": a["any_mets"][rows, t],
                "SUM_VIS_METAS": a["months_visceral_mets"][rows, t],
                "SUM_SK_METAS": a["months_skeletal_mets"][rows, t],
                f"MEDS_DAYS_{t}": a["cum_add_ddd"][rows, t],
                f"BIKA_ONLY_{t}": a["bica_only"][rows, t],
                f"BIKA_GNRH_{t}": a["bica_plus_gnrh"][rows, t],
                "SUM_DAYS": a["sum_inpatient_days"][rows, t],
            },
            index=index,
        )


def trajectory_frame(registry: Registry, ids: Sequence[str], w: int) -> pd.DataFrame:
    """Trajectory covariates at month w-1 built directly from the registry.

    Convenience wrapper over :class:`TrajectoryPanel`; use the panel when
    several strata are needed.
    """
    return TrajectoryPanel.from_registry(registry, ids, max_month=max(w, 1)).frame_at(w)
