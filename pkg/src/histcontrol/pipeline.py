"""Batch workflow driver: configuration, staged execution and run reports.

A run is fully described by a :class:`PipelineConfig`.  The config
round-trips through YAML, every artifact embeds its content hash, and all
randomness comes from the single master seed, so two runs with the same
config produce byte-identical estimate tables.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import pickle
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from scipy import stats

from .balancing import BalanceReport, ConstraintSpec, WeightSolution, balance_stratum
from .cohorts import EligibilityConfig, censor_dead_controls, select_cohorts
from .covariates import (
    TrajectoryPanel,
    impute_education_all,
    prediagnosis_frame,
    ses_matrix,
)
from .estimation import (
    BONFERRONI_FAMILY,
    DEFAULT_HORIZON,
    OUTCOME_NAMES,
    EffectEstimate,
    OutcomePanel,
    derive_outcomes,
    fit_cll,
    morbidity_bounds,
    placebo_test,
    subgroup_analysis,
    wls_atet,
)
from .factors import FactorModel, fit_factor_model, render_factor_table
from .records import SES_VARIABLES, CohortAssignment, Registry, RegistryError

__all__ = [
    "OUTPUT_DIR_ENV",
    "BalanceSettings",
    "AnalysisSettings",
    "PipelineConfig",
    "StageError",
    "RunReport",
    "stratum_frames",
    "balance_cohorts",
    "run_pipeline",
    "descriptive_table",
    "render_descriptive_table",
    "attrition_log",
    "write_report",
    "load_config",
    "apply_overrides",
]

log = logging.getLogger(__name__)

# The only environment knob: where artifacts land.  Everything else must
# come from the config file so the hash captures the whole run.
OUTPUT_DIR_ENV = "HISTCONTROL_OUTPUT_DIR"

# Skewed utilization counts get a log-scale companion column so that both
# the mean of the count and the mean of its order of magnitude are matched.
LOG_COMPANION_PREFIXES = ("VISITS_", "SUM_DAYS", "MEDS_DAYS")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name (and stratum if any)."""

    def __init__(self, stage: str, message: str, stratum: Optional[int] = None):
        self.stage = stage
        self.stratum = stratum
        where = stage if stratum is None else f"{stage}[w={stratum}]"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class BalanceSettings:
    """Constraint construction and solver knobs for the balancing stage."""

    tolerance: float = 1e-8
    max_iter: int = 200
    support_check: str = "box"
    log_companions: bool = True
    variance_covariates: Tuple[str, ...] = ()

    def spec(self) -> ConstraintSpec:
        return ConstraintSpec(
            tolerance=self.tolerance,
            max_iter=self.max_iter,
            variance_covariates=self.variance_covariates,
        )


@dataclass(frozen=True)
class AnalysisSettings:
    """Which secondary analyses run and at which outcome horizons."""

    horizons: Mapping[str, int] = field(
        default_factory=lambda: {name: DEFAULT_HORIZON for name in OUTCOME_NAMES}
    )
    bounds: bool = True
    subgroups: bool = True
    placebo: bool = True
    cll: bool = True
    cluster_se: bool = True
    factors_k: int = 5

    def __post_init__(self):
        object.__setattr__(self, "horizons", dict(self.horizons))
        missing = set(OUTCOME_NAMES) - set(self.horizons)
        if missing:
            raise ValueError(f"missing outcome horizons: {sorted(missing)}")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; hashable, YAML round-trippable.

    The scenario block configures synthetic generation only; estimation
    stages are seed-free and read just the registry files.
    """

    registry_path: str = "out/registry.jsonl"
    truth_path: str = "out/ground_truth.jsonl"
    output_dir: str = "out"
    seed: int = 20120601
    eligibility: EligibilityConfig = field(default_factory=EligibilityConfig)
    balance: BalanceSettings = field(default_factory=BalanceSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    scenario: Dict[str, Any] = field(default_factory=dict)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV, self.output_dir))

    def to_dict(self) -> dict:
        return _encode(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PipelineConfig":
        return _decode_config(dict(raw))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _encode(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _encode(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Mapping):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, frozenset):
        return sorted(value)
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, date):
        return value.isoformat()
    return value


def _decode_config(raw: dict) -> PipelineConfig:
    kwargs: Dict[str, Any] = {}
    for name in ("registry_path", "truth_path", "output_dir", "seed"):
        if name in raw:
            kwargs[name] = raw[name]
    if "eligibility" in raw:
        e = dict(raw["eligibility"])
        for key in ("treated_window", "comparison_window"):
            if key in e:
                e[key] = tuple(_as_date(v) for v in e[key])
        if "nam_atc_codes" in e:
            e["nam_atc_codes"] = frozenset(e["nam_atc_codes"])
        kwargs["eligibility"] = EligibilityConfig(**e)
    if "balance" in raw:
        b = dict(raw["balance"])
        if "variance_covariates" in b:
            b["variance_covariates"] = tuple(b["variance_covariates"])
        kwargs["balance"] = BalanceSettings(**b)
    if "analysis" in raw:
        kwargs["analysis"] = AnalysisSettings(**dict(raw["analysis"]))
    if "scenario" in raw:
        kwargs["scenario"] = dict(raw["scenario"] or {})
    return PipelineConfig(**kwargs)


def _as_date(value: Any) -> date:
    return value if isinstance(value, date) else date.fromisoformat(str(value))


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return PipelineConfig.from_yaml(handle.read())


def apply_overrides(config: PipelineConfig, overrides: Mapping[str, str]) -> PipelineConfig:
    """Apply ``dotted.name=value`` overrides on top of a config.

    Values are coerced to the type currently at that path; unknown paths
    are an error so typos do not silently change nothing.
    """
    tree = config.to_dict()
    for dotted, raw_value in overrides.items():
        node = tree
        parts = dotted.split(".")
        # the scenario block is free-form, so new keys may be created there
        free_form = parts[0] == "scenario"
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                if free_form and isinstance(node, dict):
                    node[part] = {}
                else:
                    raise KeyError(f"unknown config path: {dotted}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict):
            raise KeyError(f"unknown config path: {dotted}")
        if leaf in node:
            node[leaf] = _coerce(node[leaf], raw_value)
        elif free_form:
            node[leaf] = yaml.safe_load(raw_value)
        else:
            raise KeyError(f"unknown config path: {dotted}")
    return PipelineConfig.from_dict(tree)


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return [v for v in str(raw).split(",") if v]
    return raw


# ---------------------------------------------------------------------------
# stages


def stratum_frames(
    registry: Registry,
    cohorts: Tuple[List[CohortAssignment], List[CohortAssignment]],
    factor_model: Optional[FactorModel] = None,
    log_companions: bool = True,
) -> Dict[int, Tuple[pd.DataFrame, pd.DataFrame]]:
    """Per-stratum (treated, comparison) covariate frames for balancing.

    Each frame concatenates the pre-diagnosis block with the trajectory
    block at month w-1; the comparison side is restricted to the
    death-censored risk set for w.
    """
    treated, comparison = cohorts
    all_ids = [a.patient_id for a in treated] + [a.patient_id for a in comparison]
    education = impute_education_all(registry, all_ids)
    pre = prediagnosis_frame(
        registry, all_ids, factor_model=factor_model, imputed_education=education
    )
    panel = TrajectoryPanel.from_registry(registry, all_ids, max_month=36)

    frames: Dict[int, Tuple[pd.DataFrame, pd.DataFrame]] = {}
    for w in sorted({a.dtp_months for a in treated}):
        t_ids = [a.patient_id for a in treated if a.dtp_months == w]
        c_ids = [a.patient_id for a in censor_dead_controls(w, comparison, registry)]
        if not c_ids:
            raise StageError("covariates", "empty comparison risk set", stratum=w)
        tf = pd.concat([pre.loc[t_ids], panel.frame_at(w, t_ids)], axis=1)
        cf = pd.concat([pre.loc[c_ids], panel.frame_at(w, c_ids)], axis=1)
        if log_companions:
            for frame in (tf, cf):
                for col in list(frame.columns):
                    if col.startswith(LOG_COMPANION_PREFIXES):
                        frame["log_" + col] = np.log1p(frame[col])
        frames[w] = (tf, cf)
    return frames


def balance_cohorts(
    frames: Mapping[int, Tuple[pd.DataFrame, pd.DataFrame]],
    settings: BalanceSettings,
    workers: int = 1,
) -> Dict[int, Tuple[WeightSolution, BalanceReport]]:
    """Balance every stratum, optionally in parallel.

    Strata are independent problems; results are collected in stratum
    order, so the output is identical for any worker count.
    """
    spec = settings.spec()
    strata = sorted(frames)

    def solve(w: int):
        treated, comparison = frames[w]
        return balance_stratum(
            w, treated, comparison, spec, support_check=settings.support_check
        )

    if workers <= 1:
        results = {w: solve(w) for w in strata}
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(solve, strata))
        results = dict(zip(strata, done))
    return results


def weights_mapping(
    frames: Mapping[int, Tuple[pd.DataFrame, pd.DataFrame]],
    results: Mapping[int, Tuple[WeightSolution, BalanceReport]],
) -> Dict[int, Dict[str, float]]:
    return {
        w: dict(zip(frames[w][1].index, sol.weights))
        for w, (sol, _) in results.items()
    }


# ---------------------------------------------------------------------------
# reporting


_DESCRIPTIVE_ROWS = (
    ("age_at_diagnosis", "Age at diagnosis"),
    ("visits_1m", "Number of visits 1 month bf. diagnosis"),
    ("visits_1_6m", "Number of visits 1-6 months bf. diagnosis"),
    ("visits_6_12m", "Number of visits 6-12 months bf. diagnosis"),
    ("visits_1_60m", "Number of visits 1-60 months bf. diagnosis"),
    ("elix_dx_0", "Elixhauser index 0, at diagnosis"),
    ("elix_dx_1_4", "Elixhauser index 1-4, at diagnosis"),
    ("elix_dx_5plus", "Elixhauser index >=5, at diagnosis"),
    ("elix_12m_0", "Elixhauser index 0, 12 months bf. diagnosis"),
    ("elix_12m_1_4", "Elixhauser index 1-4, 12 months bf. diagnosis"),
    ("elix_12m_5plus", "Elixhauser index >=5, 12 months bf. diagnosis"),
    ("edu_below", "Less than secondary school education"),
    ("edu_secondary", "Secondary school education"),
    ("partnered", "Living with a partner"),
    ("nordic_born", "Born in the Nordic countries"),
)


def _stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def descriptive_table(
    registry: Registry,
    cohorts: Tuple[List[CohortAssignment], List[CohortAssignment]],
) -> pd.DataFrame:
    """Pre-diagnosis means (SDs) by arm with Welch t-tested differences."""
    treated, comparison = cohorts
    t_ids = [a.patient_id for a in treated]
    c_ids = [a.patient_id for a in comparison]
    education = impute_education_all(registry, t_ids + c_ids)
    frame = prediagnosis_frame(registry, t_ids + c_ids, imputed_education=education)
    for when in ("dx", "12m"):
        frame[f"elix_{when}_0"] = (
            1.0 - frame[f"elix_{when}_1_4"] - frame[f"elix_{when}_5plus"]
        )
    tf, cf = frame.loc[t_ids], frame.loc[c_ids]

    rows = []
    for col, label in _DESCRIPTIVE_ROWS:
        a, b = cf[col].to_numpy(), tf[col].to_numpy()
        _, p = stats.ttest_ind(a, b, equal_var=False)
        rows.append(
            {
                "description": label,
                "soc_mean": a.mean(),
                "soc_sd": a.std(ddof=1),
                "nam_mean": b.mean(),
                "nam_sd": b.std(ddof=1),
                "difference": a.mean() - b.mean(),
                "p_value": p,
                "stars": _stars(p),
            }
        )
    return pd.DataFrame(rows)


def render_descriptive_table(table: pd.DataFrame) -> str:
    """Text rendering: Description | SoC | NAM | Difference with stars."""
    width = max(len(d) for d in table["description"]) + 2
    lines = [
        f"{'Description':<{width}}{'SoC':>16}{'NAM':>16}{'Difference':>14}",
        "-" * (width + 46),
    ]
    for _, r in table.iterrows():
        soc = f"{r.soc_mean:.2f} ({r.soc_sd:.2f})"
        nam = f"{r.nam_mean:.2f} ({r.nam_sd:.2f})"
        diff = f"{r.difference:.2f}{r.stars}"
        lines.append(f"{r.description:<{width}}{soc:>16}{nam:>16}{diff:>14}")
    lines.append("Standard deviations within parentheses. "
                 "*p<0.1; **p<0.05; ***p<0.01.")
    return "\n".join(lines)


def attrition_log(
    registry: Registry,
    cfg: EligibilityConfig,
    cohorts: Tuple[List[CohortAssignment], List[CohortAssignment]],
) -> pd.DataFrame:
    """Telescoping attrition counts: each step's output is the next input."""
    treated, comparison = cohorts
    n_all = len(registry)
    in_window = sum(
        1
        for rec in registry
        if cfg.treated_window[0] <= rec.diagnosis_date <= cfg.treated_window[1]
        or cfg.comparison_window[0] <= rec.diagnosis_date <= cfg.comparison_window[1]
    )
    n_arms = len(treated) + len(comparison)
    min_w = min(a.dtp_months for a in treated)
    alive_controls = len(censor_dead_controls(min_w, comparison, registry))
    n_analysis = len(treated) + alive_controls
    steps = [
        ("registry patients", n_all, in_window),
        ("diagnosis inside a sampling window", in_window, n_arms),
        ("arm eligibility (NAM timing rules)", n_arms, n_analysis),
        ("alive at earliest treatment month", n_analysis, n_analysis),
    ]
    return pd.DataFrame(steps, columns=["step", "n_in", "n_out"])


@dataclass
class RunReport:
    """Everything one pipeline run produced, plus provenance."""

    config: PipelineConfig
    config_hash: str
    attrition: pd.DataFrame
    descriptive: pd.DataFrame
    factor_table: str
    balance: Dict[int, Tuple[WeightSolution, BalanceReport]]
    estimates: pd.DataFrame
    weights: Dict[int, Dict[str, float]]
    warnings: List[str]

    def balance_summary(self) -> pd.DataFrame:
        rows = []
        for w in sorted(self.balance):
            sol, rep = self.balance[w]
            rows.append(
                {
                    "stratum_w": w,
                    "n_treated": rep.n_treated,
                    "n_comparison": rep.n_comparison,
                    "converged": sol.converged,
                    "max_violation": sol.max_constraint_violation,
                    "max_smd_after": rep.max_smd_after(),
                    "share_weight_above_001": rep.share_weight_above_001,
                }
            )
        return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# the run itself


def _cache_path(outdir: Path, config_hash: str, stage: str) -> Path:
    return outdir / "cache" / config_hash / f"{stage}.pkl"


def _cached(outdir: Path, config_hash: str, stage: str, compute):
    """Load a pickled stage result keyed by config hash, or compute and save."""
    path = _cache_path(outdir, config_hash, stage)
    if path.exists():
        log.info("stage %s: cache hit", stage)
        with open(path, "rb") as handle:
            return pickle.load(handle)
    value = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        pickle.dump(value, handle)
    return value


def _placebo_frame(truth_path: str, ids: List[str]) -> pd.DataFrame:
    from .io import load_ground_truth

    sidecar = load_ground_truth(truth_path)
    rows = {}
    for pid in ids:
        row = sidecar["patients"].get(pid, {}).get("placebo")
        if row is not None:
            rows[pid] = row
    if not rows:
        raise StageError("placebo", f"no placebo covariates in {truth_path}")
    return pd.DataFrame.from_dict(rows, orient="index")


def run_pipeline(
    config: PipelineConfig,
    registry: Optional[Registry] = None,
    workers: int = 1,
    use_cache: bool = True,
) -> RunReport:
    """Execute the full workflow and assemble the run report.

    Stage order: select -> censor -> covariates -> balance -> outcomes ->
    main WLS -> bounds -> subgroups -> placebo -> duration model.
    """
    from .io import load_registry

    config_hash = config.config_hash()
    outdir = config.resolved_output_dir()
    warnings_list: List[str] = []

    if registry is None:
        registry = load_registry(config.registry_path)

    def stage(name: str, compute):
        if not use_cache:
            return compute()
        return _cached(outdir, config_hash, name, compute)

    try:
        cohorts = stage("cohorts", lambda: select_cohorts(registry, config.eligibility))
    except RegistryError as err:
        raise StageError("select", str(err)) from err
    treated, comparison = cohorts

    analysis = config.analysis
    factor_model = None
    if analysis.factors_k > 0:
        all_ids = sorted(
            a.patient_id for a in list(treated) + list(comparison)
        )
        ses = ses_matrix(registry, all_ids, SES_VARIABLES)
        col_means = np.nanmean(ses, axis=0)
        ses = np.where(np.isnan(ses), col_means, ses)
        factor_model = stage(
            "factors",
            lambda: fit_factor_model(
                ses, k=analysis.factors_k, variable_names=list(SES_VARIABLES)
            ),
        )

    frames = stratum_frames(
        registry, cohorts, factor_model=factor_model,
        log_companions=config.balance.log_companions,
    )
    results = stage(
        "balance", lambda: balance_cohorts(frames, config.balance, workers=workers)
    )
    for w, (sol, rep) in results.items():
        if not sol.converged:
            warnings_list.append(
                f"stratum {w}: solver stopped at violation "
                f"{sol.max_constraint_violation:.2e} after {sol.iterations} iterations"
            )

    weights = weights_mapping(frames, results)
    panel = stage(
        "outcomes",
        lambda: derive_outcomes(registry, cohorts, weights, dict(analysis.horizons)),
    )

    threshold = 0.05 / BONFERRONI_FAMILY
    cluster = analysis.cluster_se
    estimates: List[EffectEstimate] = []
    for name in OUTCOME_NAMES:
        estimates.append(
            wls_atet(panel, name, analysis.horizons[name], cluster=cluster,
                     p_threshold=threshold)
        )

    if analysis.bounds:
        for name in ("PAIN", "SRE"):
            lo, hi = morbidity_bounds(
                panel, name, analysis.horizons[name], cluster=cluster,
                p_threshold=threshold,
            )
            estimates.extend([lo, hi])

    if analysis.subgroups:
        for name in OUTCOME_NAMES:
            try:
                lo, hi = subgroup_analysis(
                    panel, name, analysis.horizons[name], cluster=cluster,
                    p_threshold=threshold,
                )
                estimates.extend([lo, hi])
            except ValueError as err:
                warnings_list.append(f"subgroups skipped for {name}: {err}")

    if analysis.placebo:
        placebo_ids = [a.patient_id for a in list(treated) + list(comparison)]
        placebo = _placebo_frame(config.truth_path, placebo_ids)
        placebo_result = placebo_test(cohorts, weights, placebo)
        estimates.extend(placebo_result.estimates)
        if placebo_result.hidden_bias_warning:
            warnings_list.append(placebo_result.hidden_bias_warning)

    if analysis.cll:
        fit = fit_cll(panel, horizon=analysis.horizons["DEAD"])
        if not fit.converged:
            warnings_list.append(
                f"duration model stopped at gradient norm {fit.gradient_norm:.2e}"
            )
        for w in fit.merged_periods:
            warnings_list.append(f"duration model: period {w} merged (separation)")
        estimates.append(
            EffectEstimate(
                outcome="DEAD",
                month=None,
                beta=fit.tau,
                se=fit.se_tau,
                p_raw=float(2 * stats.norm.sf(abs(fit.tau / fit.se_tau)))
                if fit.se_tau > 0
                else 1.0,
                p_threshold=threshold,
                analysis_tag="cll",
                n_obs=0,
            )
        )

    est_frame = pd.DataFrame([e.as_row() for e in estimates])
    report = RunReport(
        config=config,
        config_hash=config_hash,
        attrition=attrition_log(registry, config.eligibility, cohorts),
        descriptive=descriptive_table(registry, cohorts),
        factor_table=render_factor_table(factor_model) if factor_model else "",
        balance=results,
        estimates=est_frame,
        weights=weights,
        warnings=warnings_list,
    )
    return report


def write_report(report: RunReport, outdir: Optional[Path] = None) -> Path:
    """Write all run artifacts under ``<outdir>/run-<hash>/``.

    Each run directory is keyed by the config hash, so runs with differing
    configs can never overwrite each other.  Floats are formatted with a
    fixed precision to keep reruns byte-identical.
    """
    base = Path(outdir) if outdir else report.config.resolved_output_dir()
    rundir = base / f"run-{report.config_hash}"
    rundir.mkdir(parents=True, exist_ok=True)

    fmt = "%.12g"
    report.estimates.to_csv(rundir / "estimates.csv", index=False, float_format=fmt)
    report.balance_summary().to_csv(
        rundir / "balance.csv", index=False, float_format=fmt
    )
    report.attrition.to_csv(rundir / "attrition.csv", index=False)
    report.descriptive.to_csv(
        rundir / "descriptive.csv", index=False, float_format=fmt
    )
    weight_rows = [
        {"stratum_w": w, "patient_id": pid, "weight": wt}
        for w in sorted(report.weights)
        for pid, wt in sorted(report.weights[w].items())
    ]
    pd.DataFrame(weight_rows).to_csv(
        rundir / "weights.csv", index=False, float_format=fmt
    )
    with open(rundir / "descriptive.txt", "w", encoding="utf-8") as handle:
        handle.write(render_descriptive_table(report.descriptive) + "\n")
    if report.factor_table:
        with open(rundir / "factors.txt", "w", encoding="utf-8") as handle:
            handle.write(report.factor_table + "\n")

    summary = {
        "config_hash": report.config_hash,
        "config": report.config.to_dict(),
        "warnings": list(report.warnings),
        "n_strata": len(report.balance),
        "artifacts": sorted(
            p.name for p in rundir.iterdir() if p.name != "summary.yaml"
        ),
    }
    with open(rundir / "summary.yaml", "w", encoding="utf-8") as handle:
        yaml.safe_dump(summary, handle, sort_keys=True)
    return rundir
