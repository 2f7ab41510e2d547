"""Round trips and error reporting for the interchange formats."""

import json
from datetime import date, timedelta

import pytest

from histcontrol.io import (
    export_registry_csv,
    load_cohorts,
    load_ground_truth,
    load_registry,
    write_cohorts,
    write_ground_truth,
    write_registry,
)
from histcontrol.records import CohortAssignment, RowError

from conftest import make_patient, make_ses, rx, visit


def test_registry_round_trip(tmp_path, small_registry):
    path = tmp_path / "registry.jsonl"
    write_registry(small_registry, path)
    loaded = load_registry(path)
    assert len(loaded) == len(small_registry)
    for pid in small_registry.ids():
        assert loaded[pid] == small_registry[pid]


def test_registry_round_trip_preserves_missing_values(tmp_path):
    dx = date(2009, 1, 15)
    rec = make_patient(
        "P9", dx=dx, education=None, ses=make_ses(missing=("KapInk", "SocInk"))
    )
    from histcontrol.records import Registry

    path = tmp_path / "r.jsonl"
    write_registry(Registry(patients={"P9": rec}), path)
    loaded = load_registry(path)["P9"]
    assert loaded.demographics.education is None
    assert loaded.ses_panel.values["KapInk"] is None
    assert loaded.ses_panel.values["LoneInk"] == 100000.0


def test_malformed_row_carries_line_number(tmp_path, small_registry):
    path = tmp_path / "registry.jsonl"
    write_registry(small_registry, path)
    lines = path.read_text().splitlines()
    # corrupt one visit row: invalid diagnosis code
    bad_index = next(
        i for i, line in enumerate(lines) if json.loads(line)["type"] == "visit"
    )
    row = json.loads(lines[bad_index])
    row["icd10_codes"] = ["NOT_A_CODE"]
    lines[bad_index] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RowError) as err:
        load_registry(path)
    assert err.value.line == bad_index + 1


def test_cohorts_round_trip(tmp_path):
    path = tmp_path / "cohorts.jsonl"
    original = [
        CohortAssignment("P1", "treated", dtp_months=5),
        CohortAssignment("P2", "comparison"),
    ]
    write_cohorts(original, path)
    assert load_cohorts(path) == original


def test_ground_truth_round_trip(tmp_path):
    from histcontrol.simulate import ScenarioConfig, generate

    cfg = ScenarioConfig(n_treated_target=8, n_comparison_target=40, seed=3)
    _, _, truth = generate(cfg)
    path = tmp_path / "truth.jsonl"
    write_ground_truth(truth, path)
    loaded = load_ground_truth(path)
    assert loaded["true_atet"]["DEAD"]["24"] == pytest.approx(
        truth.true_atet("DEAD", 24), abs=1e-9
    )
    some_pid = next(iter(truth.severity))
    assert some_pid in loaded["patients"]
    assert "placebo" in loaded["patients"][some_pid]


def test_export_registry_csv(tmp_path, small_registry):
    paths = export_registry_csv(small_registry, tmp_path)
    assert set(paths) >= {"patient", "visit", "prescription", "ses"}
    header = open(paths["patient"]).readline()
    assert "patient_id" in header
