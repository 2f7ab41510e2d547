"""Individual patient stories: raw registry events on a timeline.

Renders the event history of one drug-treated patient (diagnosis, visits,
dispenses, the first new-drug dispense with its diagnosis-to-treatment
time) and one comparison patient, including the weight the comparison
patient received in each treatment-month stratum.

Run:  python3 demos/04_patient_timelines.py
"""

import tempfile
import warnings
from pathlib import Path

# demo-sized strata hold only a few treated patients, so some covariates
# are constant there and get dropped with a warning; hide that chatter
warnings.filterwarnings("ignore", category=UserWarning)
warnings.filterwarnings("ignore", category=RuntimeWarning)

from histcontrol.cli import main as cli
from histcontrol.io import load_cohorts
from histcontrol.pipeline import PipelineConfig


def run(base: Path) -> None:
    cfg = PipelineConfig(
        registry_path=str(base / "registry.jsonl"),
        truth_path=str(base / "ground_truth.jsonl"),
        output_dir=str(base / "out"),
        seed=303,
        scenario={"n_treated_target": 40, "n_comparison_target": 280},
    )
    cfg_path = base / "config.yaml"
    cfg_path.write_text(cfg.to_yaml(), encoding="utf-8")

    cli(["--config", str(cfg_path), "generate"])
    # the balance stage writes weights.csv, which the timeline command
    # picks up to show a comparison patient's weight profile
    cli(["--config", str(cfg_path), "balance"])

    assignments = load_cohorts(base / "cohorts.jsonl")
    treated_id = min(a.patient_id for a in assignments if a.arm == "treated")
    comparison_id = min(a.patient_id for a in assignments if a.arm == "comparison")

    print("\n=== a treated patient ===")
    cli(["--config", str(cfg_path), "timeline", treated_id])

    print("\n=== a comparison patient, with stratum weights ===")
    cli(["--config", str(cfg_path), "timeline", comparison_id])


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        run(Path(tmp))
