"""Cohort eligibility: treated/comparison selection and death censoring.

Treated patients are diagnosed inside the treated window and receive their
first NAM dispense within the maximum duration-to-prescription (DTP).
Comparison patients are diagnosed inside the earlier comparison window and
never receive a NAM within 36 months of diagnosis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from typing import List, Tuple

from .records import (
    CohortAssignment,
    Registry,
    RegistryError,
    add_months,
    months_between_ceil,
)

__all__ = ["NAM_ATC_CODES", "EligibilityConfig", "select_cohorts", "censor_dead_controls"]

# Abiraterone acetate and enzalutamide.
NAM_ATC_CODES = frozenset({"L02BX03", "L02BB04"})


@dataclass(frozen=True)
class EligibilityConfig:
    """Diagnosis windows, NAM code set and the DTP cap.

    Window dates are inclusive on both ends.  Defaults follow the operative
    sampling design: treated diagnoses 2012-06-01..2015-06-15, comparison
    diagnoses 2008-06-01..2010-06-01, DTP capped at 36 months.
    """

    treated_window: Tuple[date, date] = (date(2012, 6, 1), date(2015, 6, 15))
    comparison_window: Tuple[date, date] = (date(2008, 6, 1), date(2010, 6, 1))
    nam_atc_codes: frozenset = NAM_ATC_CODES
    max_dtp_months: int = 36

    def __post_init__(self):
        for lo, hi in (self.treated_window, self.comparison_window):
            if lo > hi:
                raise ValueError("window start after window end")
        if self.max_dtp_months < 1:
            raise ValueError("max_dtp_months must be positive")
        object.__setattr__(self, "nam_atc_codes", frozenset(self.nam_atc_codes))


def select_cohorts(
    registry: Registry, cfg: EligibilityConfig
) -> Tuple[List[CohortAssignment], List[CohortAssignment]]:
    """Apply the eligibility rules and return (treated, comparison) lists.

    DTP is the whole-month (30-day) count from diagnosis to the first NAM
    dispense, rounded up.  A patient qualifying for both arms (possible only
    under overlapping windows) is assigned to the treated arm so the arms
    stay disjoint.  An empty arm is a fatal configuration error.
    """
    treated: List[CohortAssignment] = []
    comparison: List[CohortAssignment] = []

    for pid in sorted(registry.ids()):
        rec = registry[pid]
        dx = rec.diagnosis_date
        first_nam = rec.first_dispense(cfg.nam_atc_codes)

        is_treated = False
        if cfg.treated_window[0] <= dx <= cfg.treated_window[1] and first_nam is not None:
            dtp = months_between_ceil(dx, first_nam.dispense_date)
            if dtp <= cfg.max_dtp_months:
                treated.append(
                    CohortAssignment(patient_id=pid, arm="treated", dtp_months=dtp)
                )
                is_treated = True

        if is_treated:
            continue
        if cfg.comparison_window[0] <= dx <= cfg.comparison_window[1]:
            nam_cutoff = add_months(dx, 36)
            if first_nam is None or first_nam.dispense_date >= nam_cutoff:
                comparison.append(CohortAssignment(patient_id=pid, arm="comparison"))

    if not treated:
        raise RegistryError("eligibility produced an empty treated arm")
    if not comparison:
        raise RegistryError("eligibility produced an empty comparison arm")
    return treated, comparison


def censor_dead_controls(
    stratum_w: int, comparison: List[CohortAssignment], registry: Registry
) -> List[CohortAssignment]:
    """Drop comparisons dead before diagnosis + w months, for stratum w only.

    A comparison imputed a treatment month w must be alive at that month;
    deaths at or after it are retained and contribute mortality outcomes.
    """
    if not 1 <= stratum_w <= 36:
        raise ValueError(f"stratum out of range: {stratum_w}")
    kept = []
    for a in comparison:
        rec = registry[a.patient_id]
        if not rec.dead_before(add_months(rec.diagnosis_date, stratum_w)):
            kept.append(a)
    return kept
