"""Shared builders for unit tests: tiny registries with known events."""

from datetime import date, timedelta

import pytest

from histcontrol.records import (
    Demographics,
    InpatientVisit,
    PatientRecord,
    Prescription,
    Registry,
    SocioPanel,
)


def make_ses(value=100000.0, missing=()):
    from histcontrol.records import SES_VARIABLES

    values = {name: value for name in SES_VARIABLES}
    for name in missing:
        values[name] = None
    return SocioPanel(values=values)


def make_patient(
    pid,
    dx=date(2009, 1, 15),
    birth_year=1940,
    education="secondary",
    marital="partnered",
    nordic=True,
    visits=(),
    prescriptions=(),
    death=None,
    ses=None,
):
    return PatientRecord(
        patient_id=pid,
        diagnosis_date=dx,
        demographics=Demographics(
            birth_year=birth_year,
            marital=marital,
            nordic_born=nordic,
            education=education,
        ),
        ses_panel=ses if ses is not None else make_ses(),
        visits=tuple(visits),
        prescriptions=tuple(prescriptions),
        death_date=death,
    )


def visit(dx, day, codes=("C619",), los=1):
    start = dx + timedelta(days=day)
    return InpatientVisit(
        admission_date=start,
        discharge_date=start + timedelta(days=los - 1),
        icd10_codes=tuple(codes),
    )


def rx(dx, day, atc="L02BB03", ddd=30.0):
    return Prescription(dispense_date=dx + timedelta(days=day), atc_code=atc, ddd_count=ddd)


@pytest.fixture
def small_registry():
    dx = date(2009, 1, 15)
    patients = {
        "P1": make_patient("P1", dx=dx, visits=[visit(dx, 0)], prescriptions=[rx(dx, 10)]),
        "P2": make_patient("P2", dx=dx, death=dx + timedelta(days=400)),
        "P3": make_patient("P3", dx=dx, education=None),
    }
    return Registry(patients=patients)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance scorecard after capture ends."""
    try:
        from test_acceptance import SCORECARD
    except ImportError:
        return
    if SCORECARD:
        terminalreporter.section("acceptance scorecard")
        for line in SCORECARD:
            terminalreporter.write_line(line)
