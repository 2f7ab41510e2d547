"""Entropy balancing: comparison weights matching treated moments.

Weights minimize the KL divergence to base weights subject to exact moment
constraints (treated means of the constructed features) and a fixed total
equal to the treated count in the stratum.  The problem is solved in its
dual: ``w_j \\propto q_j * exp(lambda' c(Z_j))`` with the multipliers found
by damped Newton on the strictly convex dual.  Features are standardized by
comparison-arm moments internally for conditioning; reported weights and
multipliers are on the original scale.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

__all__ = [
    "CommonSupportError",
    "ConstraintSpec",
    "WeightSolution",
    "BalanceReport",
    "build_constraints",
    "solve_dual",
    "balance_stratum",
    "balance_all",
    "kl_divergence",
    "standardized_mean_differences",
]

log = logging.getLogger(__name__)


class CommonSupportError(ValueError):
    """Balance targets lie outside the comparison support."""


@dataclass(frozen=True)
class ConstraintSpec:
    """Which moments to balance.

    ``covariates`` limits the base columns (None = every column of the
    treated frame).  ``interactions`` adds product features, ``polynomial
    degrees`` adds powers up to the given degree, and covariates listed in
    ``variance_covariates`` get a raw second-moment constraint on top of
    their mean.  ``tolerance`` is on the standardized constraint violation.
    """

    covariates: Optional[Tuple[str, ...]] = None
    interactions: Tuple[Tuple[str, str], ...] = ()
    polynomial_degrees: Mapping[str, int] = field(default_factory=dict)
    variance_covariates: Tuple[str, ...] = ()
    tolerance: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(
            self, "interactions", tuple(tuple(pair) for pair in self.interactions)
        )
        object.__setattr__(
            self, "variance_covariates", tuple(self.variance_covariates)
        )
        object.__setattr__(
            self, "polynomial_degrees", dict(self.polynomial_degrees)
        )


@dataclass
class ConstraintSet:
    """Constructed constraint features: a builder plus treated targets."""

    names: List[str]
    targets: np.ndarray
    build: Callable[[pd.DataFrame], np.ndarray]


@dataclass
class WeightSolution:
    stratum_w: int
    weights: np.ndarray  # one nonnegative weight per comparison
    multipliers: np.ndarray  # dual variables, original feature scale
    converged: bool
    max_constraint_violation: float  # standardized
    iterations: int


@dataclass
class BalanceReport:
    stratum_w: int
    table: pd.DataFrame  # per-covariate means and SMDs
    weight_histogram: pd.DataFrame  # bin edges and counts
    share_weight_above_001: float
    n_treated: int
    n_comparison: int

    def max_smd_after(self) -> float:
        return float(np.nanmax(np.abs(self.table["smd_after"].to_numpy())))


def _feature_terms(spec: ConstraintSpec, columns: Sequence[str]):
    base = list(spec.covariates) if spec.covariates is not None else list(columns)
    missing = [c for c in base if c not in columns]
    if missing:
        raise KeyError(f"unknown covariates in spec: {missing}")
    terms: List[Tuple[str, Tuple[str, ...], int]] = []
    for col in base:
        terms.append((col, (col,), 1))
    for a, b in spec.interactions:
        terms.append((f"{a}*{b}", (a, b), 1))
    for col, degree in sorted(spec.polynomial_degrees.items()):
        for power in range(2, degree + 1):
            terms.append((f"{col}^{power}", (col,), power))
    for col in spec.variance_covariates:
        terms.append((f"{col}^2", (col,), 2))
    # canonicalize: drop duplicate constraints
    seen = set()
    unique = []
    for name, cols, power in terms:
        key = (tuple(sorted(cols)), power) if len(cols) > 1 else (cols, power)
        if key in seen:
            continue
        seen.add(key)
        unique.append((name, cols, power))
    return unique


def build_constraints(
    treated: pd.DataFrame, spec: ConstraintSpec
) -> ConstraintSet:
    """Construct constraint features and their treated-mean targets.

    Constant features are dropped with a warning, and a rank-deficient
    feature set (beyond 1e-10 relative) is pruned to a maximal independent
    subset, also with a warning.
    """
    if treated.empty:
        raise ValueError("treated matrix is empty")
    values = treated.to_numpy(dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("treated matrix contains non-finite values")

    terms = _feature_terms(spec, list(treated.columns))

    def build(frame: pd.DataFrame, _terms=terms) -> np.ndarray:
        if not _terms:
            return np.zeros((len(frame), 0))
        cols = []
        for _, names, power in _terms:
            col = frame[names[0]].to_numpy(dtype=float).copy()
            for extra in names[1:]:
                col = col * frame[extra].to_numpy(dtype=float)
            if power != 1:
                col = col**power
            cols.append(col)
        return np.column_stack(cols)

    features = build(treated)
    keep = np.ptp(features, axis=0) > 0
    if not keep.all():
        dropped = [terms[j][0] for j in np.flatnonzero(~keep)]
        warnings.warn(f"dropping constant constraints: {dropped}")
        terms = [t for t, k in zip(terms, keep) if k]
        features = features[:, keep]

    # prune collinear features via pivoted QR; skipped when the treated
    # stratum has fewer rows than features (rank capped by row count, not
    # a property of the constraint set)
    if features.shape[1] > 1 and features.shape[0] > features.shape[1]:
        centered = features - features.mean(axis=0)
        scale = centered.std(axis=0)
        _, r_mat = np.linalg.qr(centered / scale)
        diag = np.abs(np.diag(r_mat))
        tol = diag.max() * 1e-10 if diag.size else 0.0
        if (diag <= tol).any():
            from scipy.linalg import qr as scipy_qr

            _, r_piv, piv = scipy_qr(centered / scale, mode="economic", pivoting=True)
            diag = np.abs(np.diag(r_piv))
            rank = int((diag > diag.max() * 1e-10).sum())
            keep_idx = np.sort(piv[:rank])
            dropped = [terms[j][0] for j in range(len(terms)) if j not in set(keep_idx)]
            warnings.warn(f"dropping collinear constraints: {dropped}")
            terms = [terms[j] for j in keep_idx]
            features = features[:, keep_idx]

    names = [t[0] for t in terms]
    targets = features.mean(axis=0)

    def build_final(frame: pd.DataFrame) -> np.ndarray:
        return build(frame, terms)

    return ConstraintSet(names=names, targets=targets, build=build_final)


def _check_support(features: np.ndarray, targets: np.ndarray, tol: float, mode: str):
    lo = features.min(axis=0) - tol
    hi = features.max(axis=0) + tol
    if np.any(targets < lo) or np.any(targets > hi):
        return False
    if mode == "lp":
        from scipy.optimize import linprog

        n = features.shape[0]
        res = linprog(
            c=np.zeros(n),
            A_eq=np.vstack([features.T, np.ones((1, n))]),
            b_eq=np.concatenate([targets, [1.0]]),
            bounds=[(0.0, None)] * n,
            method="highs",
        )
        return res.status == 0
    return True


def solve_dual(
    features: np.ndarray,
    targets: np.ndarray,
    base_weights: Optional[np.ndarray] = None,
    total_weight: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 200,
    stratum_w: int = 0,
    support_check: str = "box",
) -> WeightSolution:
    """Solve the entropy-balancing dual by damped Newton.

    `features` is the comparison feature matrix (n x r), `targets` the
    treated feature means.  The returned weights are nonnegative and sum to
    `total_weight` exactly (up to float round-off).  `support_check` is
    "box" (cheap bound check), "lp" (full linear-program feasibility) or
    "none".
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    n, r = features.shape
    if r >= n:
        raise ValueError(f"{r} constraints for {n} comparisons")
    if base_weights is None:
        base_weights = np.full(n, 1.0 / n)
    q = np.asarray(base_weights, dtype=float)
    q = q / q.sum()

    if r == 0:
        # only the total-weight constraint: maximum entropy keeps the base
        weights = q * total_weight
        return WeightSolution(
            stratum_w=stratum_w,
            weights=weights,
            multipliers=np.zeros(0),
            converged=True,
            max_constraint_violation=0.0,
            iterations=0,
        )

    if support_check != "none" and not _check_support(
        features, targets, max(tol, 1e-9), support_check
    ):
        raise CommonSupportError(f"no common support for stratum {stratum_w}")

    # standardize by comparison moments; constant columns keep scale 1
    center = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale == 0] = 1.0
    z = (features - center) / scale
    z_target = (targets - center) / scale

    lam = np.zeros(r)

    def dual_and_parts(lam_vec):
        eta = z @ lam_vec - z_target @ lam_vec
        top = eta.max()
        expw = q * np.exp(eta - top)
        zsum = expw.sum()
        value = top + np.log(zsum)
        wt = expw / zsum
        grad = wt @ z - z_target
        return value, grad, wt

    value, grad, wt = dual_and_parts(lam)
    violation = float(np.abs(grad).max())
    iterations = 0
    converged = violation <= tol
    best = (violation, lam, wt)

    while not converged and iterations < max_iter:
        iterations += 1
        diff = z - wt @ z
        hess = (diff * wt[:, None]).T @ diff
        try:
            step = np.linalg.solve(hess + 1e-13 * np.eye(r), -grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        # damping: halve until the dual decreases
        scale_step = 1.0
        for _ in range(60):
            candidate = lam + scale_step * step
            new_value, new_grad, new_wt = dual_and_parts(candidate)
            if new_value <= value + 1e-14:
                break
            scale_step *= 0.5
        else:
            break
        lam, value, grad, wt = candidate, new_value, new_grad, new_wt
        violation = float(np.abs(grad).max())
        if violation < best[0]:
            best = (violation, lam, wt)
        if violation <= tol:
            converged = True
        elif np.abs(lam).max() > 1e4:
            # multipliers diverging: target sits on the feasible boundary,
            # no interior solution exists; stop at the best iterate
            break

    if not converged:
        violation, lam, wt = best

    weights = wt * total_weight
    # exact renormalization of the total (guards float drift)
    weights *= total_weight / weights.sum()
    multipliers = lam / scale
    return WeightSolution(
        stratum_w=stratum_w,
        weights=weights,
        multipliers=multipliers,
        converged=converged,
        max_constraint_violation=violation,
        iterations=iterations,
    )


def kl_divergence(weights: np.ndarray, base_weights: Optional[np.ndarray] = None) -> float:
    """KL divergence of normalized `weights` from normalized base weights."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    if base_weights is None:
        q = np.full(w.size, 1.0 / w.size)
    else:
        q = np.asarray(base_weights, dtype=float)
        q = q / q.sum()
    mask = w > 0
    return float(np.sum(w[mask] * np.log(w[mask] / q[mask])))


def standardized_mean_differences(
    treated: pd.DataFrame,
    comparison: pd.DataFrame,
    weights: Optional[np.ndarray] = None,
) -> pd.Series:
    """(treated mean - [weighted] comparison mean) / treated SD per column.

    Columns with zero treated SD get NaN rather than an infinite SMD.
    """
    t = treated.to_numpy(dtype=float)
    c = comparison.to_numpy(dtype=float)
    t_mean = t.mean(axis=0)
    t_sd = t.std(axis=0, ddof=1)
    if weights is None:
        c_mean = c.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        c_mean = (w[:, None] * c).sum(axis=0) / w.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        smd = np.where(t_sd > 0, (t_mean - c_mean) / t_sd, np.nan)
    return pd.Series(smd, index=treated.columns)


def balance_stratum(
    w: int,
    treated: pd.DataFrame,
    comparison: pd.DataFrame,
    spec: ConstraintSpec,
    base_weights: Optional[np.ndarray] = None,
    support_check: str = "box",
) -> Tuple[WeightSolution, BalanceReport]:
    """Balance one treatment-month stratum and report diagnostics.

    `treated` and `comparison` are covariate frames with identical columns
    (pre-diagnosis block plus the trajectory block at month w-1).  The
    total comparison weight equals the treated count, so treated patients
    keep unit weights downstream.
    """
    if treated.empty:
        raise ValueError(f"no treated patients in stratum {w}")
    if list(treated.columns) != list(comparison.columns):
        raise ValueError("treated and comparison columns differ")

    constraints = build_constraints(treated, spec)
    features = constraints.build(comparison)
    solution = solve_dual(
        features,
        constraints.targets,
        base_weights=base_weights,
        total_weight=float(len(treated)),
        tol=spec.tolerance,
        max_iter=spec.max_iter,
        stratum_w=w,
        support_check=support_check,
    )

    smd_before = standardized_mean_differences(treated, comparison)
    smd_after = standardized_mean_differences(treated, comparison, solution.weights)
    weights = solution.weights
    wsum = weights.sum()
    table = pd.DataFrame(
        {
            "treated_mean": treated.mean(axis=0),
            "comparison_mean": comparison.mean(axis=0),
            "comparison_mean_weighted": (
                weights[:, None] * comparison.to_numpy(dtype=float)
            ).sum(axis=0)
            / wsum,
            "smd_before": smd_before,
            "smd_after": smd_after,
        }
    )
    edges = np.array([0.0, 1e-6, 1e-4, 1e-3, 0.01, 0.05, 0.1, 0.5, 1.0, np.inf])
    counts, _ = np.histogram(weights, bins=edges)
    histogram = pd.DataFrame(
        {"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts}
    )
    report = BalanceReport(
        stratum_w=w,
        table=table,
        weight_histogram=histogram,
        share_weight_above_001=float((weights > 0.01).mean()),
        n_treated=len(treated),
        n_comparison=len(comparison),
    )
    return solution, report


def balance_all(
    frames_by_stratum: Mapping[int, Tuple[pd.DataFrame, pd.DataFrame]],
    spec: ConstraintSpec,
    support_check: str = "box",
) -> Dict[int, Tuple[WeightSolution, BalanceReport]]:
    """Balance every stratum; empty strata are skipped and logged.

    `frames_by_stratum` maps stratum w (4..36) to (treated frame,
    comparison frame).  Comparison frames may differ across strata (death
    censoring); weight profiles per comparison patient are recoverable from
    the frames' indexes.
    """
    results: Dict[int, Tuple[WeightSolution, BalanceReport]] = {}
    for w in sorted(frames_by_stratum):
        treated, comparison = frames_by_stratum[w]
        if treated.empty:
            log.info("stratum %d skipped: no treated patients", w)
            continue
        results[w] = balance_stratum(
            w, treated, comparison, spec, support_check=support_check
        )
    return results
