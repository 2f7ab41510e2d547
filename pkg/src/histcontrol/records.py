"""Registry data model: patients, visits, prescriptions and cohort labels.

The registry is an immutable, validated snapshot of longitudinal health
events per patient.  All downstream stages (covariate construction,
balancing, estimation) are pure functions over it.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from functools import lru_cache
from typing import Optional

__all__ = [
    "DAYS_PER_MONTH",
    "ICD10_PATTERN",
    "ATC_PATTERN",
    "SES_VARIABLES",
    "RegistryError",
    "RowError",
    "Demographics",
    "InpatientVisit",
    "Prescription",
    "SocioPanel",
    "PatientRecord",
    "CohortAssignment",
    "Registry",
    "normalize_icd10",
    "normalize_atc",
    "month_index",
    "months_between_ceil",
    "add_months",
]

# Analysis months are fixed 30-day periods: outcome periods are defined at
# the end of each 30 days, so the same arithmetic is used everywhere.
DAYS_PER_MONTH = 30

ICD10_PATTERN = re.compile(r"^[A-Z][0-9]{2,3}[0-9A-Z]?$")
ATC_PATTERN = re.compile(r"^[A-Z][0-9]{2}[A-Z]{2}[0-9]{2}$")

# The 14 socioeconomic measures, each observed at the diagnosis year and one
# and two years before it (42 columns in total).
_SES_BASE = (
    "LoneInk",
    "InkFNetto",
    "KapInk",
    "DispInk",
    "DispInkFam",
    "SjukRe",
    "ArbLos",
    "ForTid",
    "SocInk",
    "SocBidrPers",
    "SocBidrFam",
    "AldPens",
    "SumTjp",
    "PrivPens",
)
SES_VARIABLES = tuple(
    name + suffix for suffix in ("", "_1y", "_2y") for name in _SES_BASE
)


class RegistryError(Exception):
    """Fatal registry problem (duplicate ids, empty arm, bad config)."""


class RowError(RegistryError):
    """A single malformed input row; carries patient id and line number."""

    def __init__(self, message: str, patient_id: str = "", line: int = -1):
        self.patient_id = patient_id
        self.line = line
        super().__init__(
            f"{message} (patient_id={patient_id!r}, line={line})"
        )


@lru_cache(maxsize=65536)
def normalize_icd10(code: str) -> str:
    """Normalize an ICD-10 code to dot-free uppercase, e.g. 'c61.9' -> 'C619'."""
    norm = code.strip().upper().replace(".", "")
    if not ICD10_PATTERN.match(norm):
        raise ValueError(f"invalid ICD-10 code: {code!r}")
    return norm


@lru_cache(maxsize=65536)
def normalize_atc(code: str) -> str:
    """Normalize an ATC code to uppercase and validate its shape."""
    norm = code.strip().upper().replace(".", "")
    if not ATC_PATTERN.match(norm):
        raise ValueError(f"invalid ATC code: {code!r}")
    return norm


def month_index(anchor: date, when: date) -> int:
    """30-day month containing `when`, counted from `anchor` (month 0)."""
    return (when - anchor).days // DAYS_PER_MONTH


def months_between_ceil(anchor: date, when: date) -> int:
    """Whole 30-day months from `anchor` to `when`, rounded up, minimum 1."""
    days = (when - anchor).days
    return max(1, math.ceil(days / DAYS_PER_MONTH))


def add_months(anchor: date, months: int) -> date:
    """Date exactly `months` 30-day periods after `anchor`."""
    return anchor + timedelta(days=DAYS_PER_MONTH * months)


@dataclass(frozen=True)
class Demographics:
    birth_year: int
    marital: str  # "partnered" | "single"
    nordic_born: bool
    education: Optional[str] = None  # below_secondary | secondary | above_secondary

    MARITAL_LEVELS = ("partnered", "single")
    EDUCATION_LEVELS = ("below_secondary", "secondary", "above_secondary")

    def __post_init__(self):
        if self.marital not in self.MARITAL_LEVELS:
            raise ValueError(f"invalid marital status: {self.marital!r}")
        if self.education is not None and self.education not in self.EDUCATION_LEVELS:
            raise ValueError(f"invalid education level: {self.education!r}")


@dataclass(frozen=True)
class InpatientVisit:
    admission_date: date
    discharge_date: date
    icd10_codes: tuple

    def __post_init__(self):
        if self.discharge_date < self.admission_date:
            raise ValueError("interval inverted")
        if len(self.icd10_codes) == 0:
            raise ValueError("visit without diagnosis codes")
        object.__setattr__(
            self, "icd10_codes", tuple(normalize_icd10(c) for c in self.icd10_codes)
        )


@dataclass(frozen=True)
class Prescription:
    dispense_date: date
    atc_code: str
    ddd_count: float

    def __post_init__(self):
        object.__setattr__(self, "atc_code", normalize_atc(self.atc_code))
        if self.ddd_count < 0:
            raise ValueError("ddd_count must be nonnegative")


@dataclass(frozen=True)
class SocioPanel:
    """Rectangular socioeconomic panel: 42 measures, missing values allowed.

    Values are keyed by the fixed `SES_VARIABLES` names; a ``None`` entry
    means the measure is missing for that patient (missingness is preserved
    rather than silently filled).
    """

    values: dict

    def __post_init__(self):
        unknown = set(self.values) - set(SES_VARIABLES)
        if unknown:
            raise ValueError(f"unknown SES variables: {sorted(unknown)}")
        filled = {name: self.values.get(name) for name in SES_VARIABLES}
        object.__setattr__(self, "values", filled)

    def as_row(self) -> list:
        return [self.values[name] for name in SES_VARIABLES]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    diagnosis_date: date
    demographics: Demographics
    ses_panel: SocioPanel
    visits: tuple = ()
    prescriptions: tuple = ()
    death_date: Optional[date] = None

    def __post_init__(self):
        object.__setattr__(
            self, "visits", tuple(sorted(self.visits, key=lambda v: v.admission_date))
        )
        object.__setattr__(
            self,
            "prescriptions",
            tuple(sorted(self.prescriptions, key=lambda p: p.dispense_date)),
        )
        if self.death_date is not None and self.death_date < self.diagnosis_date:
            raise ValueError("death_date before diagnosis_date")
        age = self.age_at_diagnosis
        if not 18 <= age <= 110:
            raise ValueError(f"age at diagnosis out of range: {age}")

    @property
    def age_at_diagnosis(self) -> int:
        return self.diagnosis_date.year - self.demographics.birth_year

    def first_dispense(self, atc_codes) -> Optional[Prescription]:
        """Earliest prescription whose ATC code is in `atc_codes` (or None)."""
        codes = set(atc_codes)
        for rx in self.prescriptions:
            if rx.atc_code in codes:
                return rx
        return None

    def dead_before(self, when: date) -> bool:
        return self.death_date is not None and self.death_date < when


@dataclass(frozen=True)
class CohortAssignment:
    patient_id: str
    arm: str  # "treated" | "comparison"
    dtp_months: Optional[int] = None

    def __post_init__(self):
        if self.arm == "treated":
            if self.dtp_months is None:
                raise ValueError("treated assignment requires dtp_months")
            if not 1 <= self.dtp_months <= 36:
                raise ValueError(f"dtp_months out of range: {self.dtp_months}")
        elif self.arm == "comparison":
            if self.dtp_months is not None:
                raise ValueError("comparison assignment must not carry dtp_months")
        else:
            raise ValueError(f"invalid arm: {self.arm!r}")


@dataclass(frozen=True)
class Registry:
    """Immutable mapping of patient_id to validated PatientRecord."""

    patients: dict = field(default_factory=dict)

    def __post_init__(self):
        for pid, rec in self.patients.items():
            if pid != rec.patient_id:
                raise RegistryError(f"key/id mismatch for {pid!r}")

    def __len__(self) -> int:
        return len(self.patients)

    def __contains__(self, patient_id: str) -> bool:
        return patient_id in self.patients

    def __getitem__(self, patient_id: str) -> PatientRecord:
        return self.patients[patient_id]

    def __iter__(self):
        return iter(self.patients.values())

    def ids(self) -> list:
        return list(self.patients.keys())
