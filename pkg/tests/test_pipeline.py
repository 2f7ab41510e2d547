"""End-to-end workflow: config plumbing, stages, CLI, determinism."""

import json
import hashlib
import pickle
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from histcontrol.cli import main, render_timeline, scenario_from_config
from histcontrol.pipeline import (
    OUTPUT_DIR_ENV,
    BalanceSettings,
    PipelineConfig,
    apply_overrides,
    attrition_log,
    _cached,
    descriptive_table,
    render_descriptive_table,
    run_pipeline,
    write_report,
)


# ---------------------------------------------------------------------------
# configuration plumbing


def test_yaml_round_trip_is_lossless():
    cfg = PipelineConfig(
        registry_path="data/reg.jsonl",
        seed=7,
        balance=BalanceSettings(tolerance=1e-9, variance_covariates=("AGE",)),
        scenario={"n_treated_target": 10, "true_effects": {"mortality": 0.3}},
    )
    restored = PipelineConfig.from_yaml(cfg.to_yaml())
    assert restored == cfg
    assert restored.config_hash() == cfg.config_hash()
    # and the YAML itself is stable
    assert restored.to_yaml() == cfg.to_yaml()


def test_config_hash_sensitivity():
    base = PipelineConfig()
    assert base.config_hash() == PipelineConfig().config_hash()
    assert len(base.config_hash()) == 16
    assert PipelineConfig(seed=1).config_hash() != base.config_hash()
    assert (
        PipelineConfig(scenario={"x": 1}).config_hash()
        != PipelineConfig(scenario={"x": 2}).config_hash()
    )


def test_apply_overrides_coerces_to_existing_types():
    cfg = PipelineConfig()
    out = apply_overrides(
        cfg,
        {
            "seed": "99",
            "balance.tolerance": "1e-6",
            "analysis.placebo": "off",
            "analysis.horizons.DEAD": "30",
        },
    )
    assert out.seed == 99
    assert out.balance.tolerance == 1e-6
    assert out.analysis.placebo is False
    assert out.analysis.horizons["DEAD"] == 30
    with pytest.raises(KeyError):
        apply_overrides(cfg, {"balance.no_such_knob": "1"})
    with pytest.raises(KeyError):
        apply_overrides(cfg, {"nonsense.path": "1"})
    with pytest.raises(ValueError):
        apply_overrides(cfg, {"analysis.placebo": "maybe"})


def test_scenario_overrides_are_free_form():
    cfg = apply_overrides(
        PipelineConfig(),
        {
            "scenario.n_treated_target": "40",
            "scenario.true_effects.mortality": "0.3",
            "scenario.assignment.mode": "baseline",
        },
    )
    assert cfg.scenario["n_treated_target"] == 40
    assert cfg.scenario["true_effects"]["mortality"] == 0.3
    scenario = scenario_from_config(cfg)
    assert scenario.n_treated_target == 40
    assert scenario.true_effects.mortality == 0.3
    assert scenario.assignment.mode == "baseline"
    assert scenario.seed == cfg.seed


def test_output_dir_env_var(monkeypatch, tmp_path):
    cfg = PipelineConfig(output_dir="somewhere/else")
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert cfg.resolved_output_dir() == tmp_path
    monkeypatch.delenv(OUTPUT_DIR_ENV)
    assert cfg.resolved_output_dir() == Path("somewhere/else")


def test_stage_cache_returns_stored_value(tmp_path):
    calls = []

    def compute():
        calls.append(1)
        return {"x": 3}

    first = _cached(tmp_path, "deadbeef", "stage1", compute)
    second = _cached(tmp_path, "deadbeef", "stage1", compute)
    assert first == second == {"x": 3}
    assert len(calls) == 1  # second call was a cache hit
    # a different config hash misses the cache
    _cached(tmp_path, "0000beef", "stage1", compute)
    assert len(calls) == 2


# ---------------------------------------------------------------------------
# a full run on a small generated scenario


SCENARIO = {"n_treated_target": 60, "n_comparison_target": 420}


@pytest.fixture(scope="module")
def rundirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    cfg = PipelineConfig(
        registry_path=str(base / "registry.jsonl"),
        truth_path=str(base / "ground_truth.jsonl"),
        output_dir=str(base / "out"),
        seed=614,
        scenario=dict(SCENARIO),
    )
    cfg_path = base / "config.yaml"
    cfg_path.write_text(cfg.to_yaml(), encoding="utf-8")
    assert main(["--config", str(cfg_path), "generate"]) == 0
    report = run_pipeline(cfg, use_cache=False)
    return base, cfg, cfg_path, report


def test_generate_manifest_checksums(rundirs):
    base, cfg, _, _ = rundirs
    manifest = json.loads((base / "manifest.json").read_text())
    assert manifest["n_treated"] == SCENARIO["n_treated_target"]
    assert manifest["n_comparison"] == SCENARIO["n_comparison_target"]
    assert manifest["config_hash"] == cfg.config_hash()
    for name, digest in manifest["checksums"].items():
        assert hashlib.sha256((base / name).read_bytes()).hexdigest() == digest


def test_attrition_counts_telescope(rundirs):
    _, _, _, report = rundirs
    table = report.attrition
    for prev, nxt in zip(table.itertuples(), list(table.itertuples())[1:]):
        assert prev.n_out == nxt.n_in
    assert (table.n_out <= table.n_in).all()
    assert table.iloc[0].n_in == sum(SCENARIO.values())


def test_descriptive_table_layout(rundirs):
    _, _, _, report = rundirs
    table = report.descriptive
    descs = set(table["description"])
    assert "Age at diagnosis" in descs
    assert any("ndex 0" in d for d in descs)  # comorbidity index class shares
    text = render_descriptive_table(table)
    assert "Difference" in text
    assert "*p<0.1; **p<0.05; ***p<0.01." in text
    # comorbidity class shares lie in [0, 1] in both arms
    elix = table[table["description"].str.contains("ndex")]
    for col in ("soc_mean", "nam_mean"):
        assert elix[col].between(0, 1).all()


def test_weights_add_up_and_balance_holds(rundirs):
    _, _, _, report = rundirs
    summary = report.balance_summary()
    # tiny strata may stop short of the tolerance; every converged one meets it
    converged = summary[summary["converged"]]
    assert len(converged) > 0
    assert (converged["max_violation"] <= 1e-8).all()
    treated_counts = summary.set_index("stratum_w")["n_treated"]
    for w, mapping in report.weights.items():
        total = float(np.sum(list(mapping.values())))
        assert total == pytest.approx(float(treated_counts.loc[w]), rel=1e-10)


def test_estimates_cover_requested_analyses(rundirs):
    _, _, _, report = rundirs
    tags = set(report.estimates["analysis_tag"])
    assert {"main", "bound_lo", "bound_hi", "placebo", "cll"} <= tags
    main_rows = report.estimates[report.estimates["analysis_tag"] == "main"]
    assert set(main_rows["outcome"]) == {"DEAD", "PAIN", "SRE"}
    assert np.allclose(main_rows["threshold"], 0.05 / 3, rtol=0, atol=1e-15)
    # the two imputation fits are ordered by construction
    for outcome in ("PAIN", "SRE"):
        rows = report.estimates[report.estimates["outcome"] == outcome]
        lo = rows[rows["analysis_tag"] == "bound_lo"]["beta"].iloc[0]
        hi = rows[rows["analysis_tag"] == "bound_hi"]["beta"].iloc[0]
        assert lo <= hi


def test_run_outputs_identical_across_worker_counts(rundirs, tmp_path):
    _, cfg, _, _ = rundirs
    payloads = {}
    for workers in (1, 3):
        report = run_pipeline(cfg, workers=workers, use_cache=False)
        outdir = tmp_path / f"w{workers}"
        rundir = write_report(report, outdir=outdir)
        payloads[workers] = {
            name: (rundir / name).read_bytes()
            for name in ("estimates.csv", "weights.csv", "balance.csv")
        }
    assert payloads[1] == payloads[3]


def test_placebo_toggle_leaves_other_rows_unchanged(rundirs):
    _, cfg, _, report = rundirs
    tree = cfg.to_dict()
    tree["analysis"]["placebo"] = False
    without = run_pipeline(PipelineConfig.from_dict(tree), use_cache=False)
    assert not (without.estimates["analysis_tag"] == "placebo").any()
    keep = report.estimates[report.estimates["analysis_tag"] != "placebo"]
    pd.testing.assert_frame_equal(
        keep.reset_index(drop=True), without.estimates.reset_index(drop=True)
    )


def test_cached_rerun_matches_fresh_run(rundirs):
    _, cfg, _, report = rundirs
    warm = run_pipeline(cfg, use_cache=True)   # populates the cache
    cached = run_pipeline(cfg, use_cache=True)  # reads it back
    pd.testing.assert_frame_equal(report.estimates, warm.estimates)
    pd.testing.assert_frame_equal(report.estimates, cached.estimates)
    cache_dir = cfg.resolved_output_dir() / "cache" / cfg.config_hash()
    assert (cache_dir / "balance.pkl").exists()


def test_report_artifacts_and_summary(rundirs):
    _, cfg, cfg_path, report = rundirs
    rundir = write_report(report)
    expected = {
        "estimates.csv", "balance.csv", "attrition.csv", "descriptive.csv",
        "descriptive.txt", "weights.csv", "factors.txt", "summary.yaml",
    }
    assert expected <= {p.name for p in rundir.iterdir()}
    summary = yaml.safe_load((rundir / "summary.yaml").read_text())
    assert summary["config_hash"] == cfg.config_hash()
    assert summary["config"] == cfg.to_dict()
    assert main(["--config", str(cfg_path), "report"]) == 0
    factors = (rundir / "factors.txt").read_text()
    assert "SS loadings" in factors


# ---------------------------------------------------------------------------
# CLI surface


def test_cli_timeline_for_treated_patient(rundirs, capsys):
    base, cfg, cfg_path, report = rundirs
    write_report(report)
    from histcontrol.io import load_cohorts

    cohorts = load_cohorts(base / "cohorts.jsonl")
    treated = next(a for a in cohorts if a.arm == "treated")
    assert main(["--config", str(cfg_path), "timeline", treated.patient_id]) == 0
    out = capsys.readouterr().out
    assert ">>> diagnosis (month 0)" in out
    assert "<<< 36-month window ends" in out
    assert f"DTP {treated.dtp_months} months" in out
    assert " # " in out  # events inside the window are shaded

    comparison = next(a for a in cohorts if a.arm == "comparison")
    assert main(["--config", str(cfg_path), "timeline", comparison.patient_id]) == 0
    out = capsys.readouterr().out
    assert "weight profile across strata:" in out
    assert "DTP" not in out


def test_cli_timeline_unknown_patient(rundirs, capsys):
    _, _, cfg_path, _ = rundirs
    assert main(["--config", str(cfg_path), "timeline", "NOBODY"]) == 1
    assert "unknown patient" in capsys.readouterr().err


def test_render_timeline_marks_death(rundirs):
    from datetime import date, timedelta

    from histcontrol.records import Registry

    import sys
    sys.path.insert(0, str(Path(__file__).parent))
    from conftest import make_patient, rx, visit

    dx = date(2009, 1, 15)
    rec = make_patient(
        "P1",
        dx=dx,
        visits=[visit(dx, 5)],
        prescriptions=[rx(dx, 50, atc="L02BX03")],
        death=dx + timedelta(days=400),
    )
    text = render_timeline(Registry({"P1": rec}), "P1")
    assert ">>> death" in text
    assert "first NAM dispense" in text
    assert "DTP 2 months" in text
    with pytest.raises(KeyError):
        render_timeline(Registry({"P1": rec}), "P2")


def test_cli_bad_override_exit_code(rundirs, capsys):
    _, _, cfg_path, _ = rundirs
    code = main(["--config", str(cfg_path), "--set", "no.such=1", "run"])
    assert code == 2
    assert "bad override" in capsys.readouterr().err


def test_cli_missing_registry_exit_code(tmp_path, capsys):
    cfg = PipelineConfig(
        registry_path=str(tmp_path / "absent.jsonl"),
        output_dir=str(tmp_path),
    )
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(cfg.to_yaml(), encoding="utf-8")
    assert main(["--config", str(cfg_path), "run"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_set_and_shorthand_overrides_agree(rundirs):
    _, _, cfg_path, _ = rundirs
    from histcontrol.cli import _collect_overrides

    assert _collect_overrides(["a.b=1"], ["--c.d", "2", "--e.f=3"]) == {
        "a.b": "1", "c.d": "2", "e.f": "3",
    }
    with pytest.raises(SystemExit):
        _collect_overrides(["nonsense"], [])
    with pytest.raises(SystemExit):
        _collect_overrides([], ["--dangling"])
