"""Eligibility rules: arm selection, DTP computation, death censoring."""

from datetime import date, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histcontrol.cohorts import (
    EligibilityConfig,
    censor_dead_controls,
    select_cohorts,
)
from histcontrol.records import (
    CohortAssignment,
    Registry,
    RegistryError,
    months_between_ceil,
)

from conftest import make_patient, rx

TREATED_DX = date(2013, 1, 10)
COMPARISON_DX = date(2009, 1, 10)


def registry_of(*patients):
    return Registry(patients={p.patient_id: p for p in patients})


def base_pair():
    """One valid treated and one valid comparison patient."""
    treated = make_patient(
        "T1", dx=TREATED_DX, prescriptions=[rx(TREATED_DX, 40, atc="L02BX03")]
    )
    comparison = make_patient("C1", dx=COMPARISON_DX)
    return treated, comparison


def test_treated_dtp_from_first_nam():
    treated, comparison = base_pair()
    t, c = select_cohorts(registry_of(treated, comparison), EligibilityConfig())
    assert t == [CohortAssignment("T1", "treated", dtp_months=2)]
    assert c == [CohortAssignment("C1", "comparison")]


def test_same_day_nam_gives_dtp_one():
    treated = make_patient(
        "T1", dx=TREATED_DX, prescriptions=[rx(TREATED_DX, 0, atc="L02BB04")]
    )
    t, _ = select_cohorts(
        registry_of(treated, base_pair()[1]), EligibilityConfig()
    )
    assert t[0].dtp_months == 1


def test_dtp_beyond_cap_not_treated():
    late = make_patient(
        "T1", dx=TREATED_DX, prescriptions=[rx(TREATED_DX, 36 * 30 + 1, atc="L02BX03")]
    )
    comparison = base_pair()[1]
    with pytest.raises(RegistryError):
        # no treated patient remains, which is a fatal configuration
        select_cohorts(registry_of(late, comparison), EligibilityConfig())


def test_comparison_excluded_if_nam_within_36_months():
    treated, _ = base_pair()
    tainted = make_patient(
        "C1", dx=COMPARISON_DX, prescriptions=[rx(COMPARISON_DX, 500, atc="L02BX03")]
    )
    clean = make_patient("C2", dx=COMPARISON_DX)
    _, c = select_cohorts(registry_of(treated, tainted, clean), EligibilityConfig())
    assert [a.patient_id for a in c] == ["C2"]


def test_comparison_kept_if_nam_after_36_months():
    treated, _ = base_pair()
    late_nam = make_patient(
        "C1",
        dx=COMPARISON_DX,
        prescriptions=[rx(COMPARISON_DX, 36 * 30, atc="L02BX03")],
    )
    _, c = select_cohorts(registry_of(treated, late_nam), EligibilityConfig())
    assert [a.patient_id for a in c] == ["C1"]


def test_out_of_window_patients_ignored():
    treated, comparison = base_pair()
    outside = make_patient("X1", dx=date(2011, 6, 1))
    t, c = select_cohorts(registry_of(treated, comparison, outside), EligibilityConfig())
    assert {a.patient_id for a in t + c} == {"T1", "C1"}


def test_empty_arm_is_fatal():
    treated, _ = base_pair()
    with pytest.raises(RegistryError):
        select_cohorts(registry_of(treated), EligibilityConfig())


def test_censor_dead_controls_boundary():
    treated, _ = base_pair()
    # dies one day before month 6 ends vs exactly at month 6
    dead_early = make_patient(
        "C1", dx=COMPARISON_DX, death=COMPARISON_DX + timedelta(days=6 * 30 - 1)
    )
    dead_at = make_patient(
        "C2", dx=COMPARISON_DX, death=COMPARISON_DX + timedelta(days=6 * 30)
    )
    alive = make_patient("C3", dx=COMPARISON_DX)
    reg = registry_of(treated, dead_early, dead_at, alive)
    _, comparison = select_cohorts(reg, EligibilityConfig())
    kept = censor_dead_controls(6, comparison, reg)
    assert {a.patient_id for a in kept} == {"C2", "C3"}


@settings(max_examples=50, deadline=None)
@given(
    nam_days=st.lists(
        st.integers(min_value=0, max_value=1300), min_size=1, max_size=6
    )
)
def test_selection_properties(nam_days):
    """Arms are disjoint, selection is idempotent, DTP is recomputable."""
    patients = [
        make_patient(
            f"T{i}", dx=TREATED_DX, prescriptions=[rx(TREATED_DX, d, atc="L02BX03")]
        )
        for i, d in enumerate(nam_days)
    ]
    patients.append(make_patient("C0", dx=COMPARISON_DX))
    # ensure at least one treated stays eligible
    patients.append(
        make_patient("T_ok", dx=TREATED_DX, prescriptions=[rx(TREATED_DX, 5, atc="L02BX03")])
    )
    reg = registry_of(*patients)
    cfg = EligibilityConfig()
    t1, c1 = select_cohorts(reg, cfg)
    t2, c2 = select_cohorts(reg, cfg)
    assert (t1, c1) == (t2, c2)
    assert not {a.patient_id for a in t1} & {a.patient_id for a in c1}
    for a in t1:
        rec = reg[a.patient_id]
        first = rec.first_dispense(cfg.nam_atc_codes)
        assert a.dtp_months == months_between_ceil(rec.diagnosis_date, first.dispense_date)
        assert 1 <= a.dtp_months <= cfg.max_dtp_months
