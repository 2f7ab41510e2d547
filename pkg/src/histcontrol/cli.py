"""Command-line entry points for the historical-control workflow.

Subcommands: generate, run, balance, estimate, placebo, timeline, report.
Every config value can be overridden with a flag of the same dotted name,
e.g. ``--set scenario.seed=7`` or the shorthand ``--scenario.seed 7``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from .cohorts import select_cohorts
from .io import load_registry, write_cohorts, write_ground_truth, write_registry
from .pipeline import (
    PipelineConfig,
    StageError,
    apply_overrides,
    load_config,
    run_pipeline,
    write_report,
)
from .records import DAYS_PER_MONTH, Registry, RegistryError, add_months
from .simulate import (
    AssignmentParams,
    OutcomeParams,
    ProgressionParams,
    ScenarioConfig,
    TrueEffects,
    generate,
)

log = logging.getLogger(__name__)


def scenario_from_config(config: PipelineConfig) -> ScenarioConfig:
    """Build the generator scenario from the config's scenario block.

    The pipeline's master seed and eligibility windows flow into the
    scenario so a single config describes generation and analysis.
    """
    raw = dict(config.scenario)
    nested = {
        "progression": ProgressionParams,
        "assignment": AssignmentParams,
        "outcome_model": OutcomeParams,
        "true_effects": TrueEffects,
    }
    kwargs = {}
    for key, cls in nested.items():
        if key in raw:
            kwargs[key] = cls(**raw.pop(key))
    raw.pop("seed", None)
    kwargs.update(raw)
    return ScenarioConfig(seed=config.seed, eligibility=config.eligibility, **kwargs)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cmd_generate(config: PipelineConfig) -> int:
    scenario = scenario_from_config(config)
    registry, (treated, comparison), truth = generate(scenario)

    registry_path = Path(config.registry_path)
    truth_path = Path(config.truth_path)
    registry_path.parent.mkdir(parents=True, exist_ok=True)
    truth_path.parent.mkdir(parents=True, exist_ok=True)
    cohorts_path = registry_path.with_name("cohorts.jsonl")

    write_registry(registry, registry_path)
    write_cohorts(treated + comparison, cohorts_path)
    write_ground_truth(truth, truth_path)

    manifest = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "n_treated": len(treated),
        "n_comparison": len(comparison),
        "checksums": {
            registry_path.name: _sha256(registry_path),
            cohorts_path.name: _sha256(cohorts_path),
            truth_path.name: _sha256(truth_path),
        },
    }
    manifest_path = registry_path.with_name("manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"wrote {registry_path} ({len(registry)} patients)")
    print(f"arms: {len(treated)} treated / {len(comparison)} comparison")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_run(config: PipelineConfig, workers: int = 1) -> int:
    report = run_pipeline(config, workers=workers)
    rundir = write_report(report)
    print(f"run {report.config_hash} -> {rundir}")
    for line in report.warnings:
        print(f"warning: {line}")
    print(report.estimates.to_string(index=False))
    return 0


def cmd_balance(config: PipelineConfig, workers: int = 1) -> int:
    analysis = _toggled(config, bounds=False, subgroups=False, placebo=False, cll=False)
    report = run_pipeline(analysis, workers=workers)
    rundir = write_report(report)
    print(report.balance_summary().to_string(index=False))
    print(f"weights: {rundir / 'weights.csv'}")
    return 0


def cmd_estimate(config: PipelineConfig, workers: int = 1) -> int:
    report = run_pipeline(_toggled(config, placebo=False), workers=workers)
    rundir = write_report(report)
    print(report.estimates.to_string(index=False))
    print(f"estimates: {rundir / 'estimates.csv'}")
    return 0


def cmd_placebo(config: PipelineConfig, workers: int = 1) -> int:
    analysis = _toggled(config, bounds=False, subgroups=False, cll=False, placebo=True)
    report = run_pipeline(analysis, workers=workers)
    rows = report.estimates[report.estimates["analysis_tag"] == "placebo"]
    print(rows.to_string(index=False))
    for line in report.warnings:
        if "hidden bias" in line.lower():
            print(f"warning: {line}")
    return 0


def _toggled(config: PipelineConfig, **flags) -> PipelineConfig:
    tree = config.to_dict()
    for name, value in flags.items():
        tree["analysis"][name] = value
    return PipelineConfig.from_dict(tree)


def cmd_report(config: PipelineConfig) -> int:
    rundir = config.resolved_output_dir() / f"run-{config.config_hash()}"
    if not rundir.is_dir():
        print(f"no run directory for this config: {rundir}", file=sys.stderr)
        return 1
    for name in ("summary.yaml", "descriptive.txt", "factors.txt"):
        path = rundir / name
        if path.exists():
            print(f"--- {name} ---")
            print(path.read_text(encoding="utf-8"))
    estimates = rundir / "estimates.csv"
    if estimates.exists():
        print("--- estimates ---")
        print(pd.read_csv(estimates).to_string(index=False))
    return 0


# ---------------------------------------------------------------------------
# timeline


def render_timeline(
    registry: Registry,
    patient_id: str,
    dtp_months: Optional[int] = None,
    weight_profile: Optional[pd.DataFrame] = None,
    nam_atc_codes=frozenset({"L02BX03", "L02BB04"}),
) -> str:
    """Chronological text rendering of one patient's registry events.

    Marks diagnosis, the 36-month follow-up window, and the first NAM
    dispense with its DTP when present.  A comparison patient's weight
    profile across strata is appended when supplied.
    """
    if patient_id not in registry:
        raise KeyError(f"unknown patient id: {patient_id}")
    rec = registry[patient_id]
    dx = rec.diagnosis_date
    window_end = add_months(dx, 36)

    events: List[tuple] = [(dx, "mark", ">>> diagnosis (month 0)")]
    events.append((window_end, "mark", "<<< 36-month window ends"))
    for visit in rec.visits:
        events.append(
            (visit.admission_date, "visit",
             f"visit   {','.join(visit.icd10_codes)}"
             f" [{(visit.discharge_date - visit.admission_date).days + 1}d]")
        )
    for rx in rec.prescriptions:
        events.append((rx.dispense_date, "rx", f"rx      {rx.atc_code} x{rx.ddd_count:g}"))
    if rec.death_date is not None:
        events.append((rec.death_date, "mark", ">>> death"))
    events.sort(key=lambda e: (e[0], e[1]))

    first_nam = rec.first_dispense(nam_atc_codes)
    lines = [f"patient {patient_id}  diagnosis {dx.isoformat()}"]
    for when, _, text in events:
        month = (when - dx).days // DAYS_PER_MONTH
        shade = "#" if dx <= when <= window_end else " "
        lines.append(f"  {when.isoformat()} {shade} m{month:>3}  {text}")
    if first_nam is not None:
        dtp = dtp_months
        if dtp is None:
            days = (first_nam.dispense_date - dx).days
            dtp = max(1, -(-days // DAYS_PER_MONTH))
        lines.append(
            f"  first NAM dispense {first_nam.dispense_date.isoformat()}"
            f" ({first_nam.atc_code}), DTP {dtp} months"
        )
    if weight_profile is not None and len(weight_profile):
        lines.append("  weight profile across strata:")
        for _, row in weight_profile.iterrows():
            lines.append(
                f"    w={int(row.stratum_w):>2}  weight={row.weight:.6f}"
            )
    return "\n".join(lines)


def cmd_timeline(config: PipelineConfig, patient_id: str) -> int:
    registry = load_registry(config.registry_path)
    if patient_id not in registry:
        print(f"unknown patient id: {patient_id}", file=sys.stderr)
        return 1

    dtp = None
    try:
        treated, _ = select_cohorts(registry, config.eligibility)
        dtp = next(
            (a.dtp_months for a in treated if a.patient_id == patient_id), None
        )
    except RegistryError:
        pass

    profile = None
    weights_csv = (
        config.resolved_output_dir() / f"run-{config.config_hash()}" / "weights.csv"
    )
    if weights_csv.exists():
        table = pd.read_csv(weights_csv)
        rows = table[table["patient_id"] == patient_id]
        if len(rows):
            profile = rows
    print(
        render_timeline(
            registry,
            patient_id,
            dtp_months=dtp,
            weight_profile=profile,
            nam_atc_codes=config.eligibility.nam_atc_codes,
        )
    )
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _collect_overrides(pairs: Sequence[str], extras: Sequence[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--set expects dotted.name=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key] = value
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise SystemExit(f"unexpected argument: {token!r}")
        name = token[2:]
        if "=" in name:
            key, value = name.split("=", 1)
            overrides[key] = value
            i += 1
        else:
            if i + 1 >= len(extras):
                raise SystemExit(f"flag {token!r} needs a value")
            overrides[name] = extras[i + 1]
            i += 2
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histcontrol",
        description="Historical-control comparative effectiveness workflow.",
    )
    parser.add_argument("--config", type=str, default=None, help="YAML config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="DOTTED.NAME=VALUE",
        help="override one config value (repeatable)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    workers = argparse.ArgumentParser(add_help=False)
    workers.add_argument("--workers", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "report"):
        sub.add_parser(name)
    for name in ("run", "balance", "estimate", "placebo"):
        sub.add_parser(name, parents=[workers])
    timeline = sub.add_parser("timeline")
    timeline.add_argument("patient_id")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = _collect_overrides(args.set, extras)
    if overrides:
        try:
            config = apply_overrides(config, overrides)
        except (KeyError, ValueError) as err:
            print(f"bad override: {err}", file=sys.stderr)
            return 2

    try:
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "run":
            return cmd_run(config, workers=args.workers)
        if args.command == "balance":
            return cmd_balance(config, workers=args.workers)
        if args.command == "estimate":
            return cmd_estimate(config, workers=args.workers)
        if args.command == "placebo":
            return cmd_placebo(config, workers=args.workers)
        if args.command == "report":
            return cmd_report(config)
        if args.command == "timeline":
            return cmd_timeline(config, args.patient_id)
    except StageError as err:
        print(f"stage failed: {err}", file=sys.stderr)
        return 1
    except (RegistryError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
