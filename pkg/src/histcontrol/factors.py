"""Exploratory factor analysis for the 42-variable socioeconomic panel.

Maximum-likelihood extraction on the sample correlation matrix, varimax
rotation, regression-method factor scores, and a rendering of the
SS loadings / Proportion Var / Cumulative Var summary table.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "FactorModel",
    "HeywoodWarning",
    "fit_factor_model",
    "score_factors",
    "varimax",
    "tucker_congruence",
    "render_factor_table",
]

# Uniqueness floor applied in Heywood cases.
_MIN_UNIQUENESS = 0.005


class HeywoodWarning(UserWarning):
    """A uniqueness hit its lower bound and was clamped."""


@dataclass
class FactorModel:
    """Fitted, rotated and canonicalized factor model.

    Loadings are on the correlation (standardized) scale.  Factors are
    ordered by descending sum-of-squared loadings and each factor's sign is
    fixed so its largest-magnitude loading is positive.
    """

    loadings: np.ndarray  # (p, k)
    uniquenesses: np.ndarray  # (p,)
    rotation: np.ndarray  # (k, k) orthogonal
    proportion_var: np.ndarray  # (k,)
    cumulative_var: np.ndarray  # (k,)
    variable_names: List[str]
    means: np.ndarray  # fit-time column means
    sds: np.ndarray  # fit-time column SDs
    score_weights: np.ndarray  # (p, k) regression-score coefficients

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    def ss_loadings(self) -> np.ndarray:
        return (self.loadings**2).sum(axis=0)

    def implied_correlation(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.uniquenesses)


def _ml_discrepancy(psi: np.ndarray, corr: np.ndarray, k: int) -> float:
    # Joreskog's concentrated ML objective over the trailing eigenvalues of
    # psi^{-1/2} R psi^{-1/2}.
    scale = 1.0 / np.sqrt(psi)
    sstar = corr * np.outer(scale, scale)
    values = np.linalg.eigvalsh(sstar)[::-1][k:]
    return -(np.sum(np.log(values) - values) - k + corr.shape[0])


def _loadings_from_psi(psi: np.ndarray, corr: np.ndarray, k: int) -> np.ndarray:
    scale = 1.0 / np.sqrt(psi)
    sstar = corr * np.outer(scale, scale)
    values, vectors = np.linalg.eigh(sstar)
    values = values[::-1][:k]
    vectors = vectors[:, ::-1][:, :k]
    values = np.maximum(values - 1.0, 0.0)
    loadings = vectors * np.sqrt(values)
    return loadings / scale[:, None]


def varimax(loadings: np.ndarray, tol: float = 1e-10, max_iter: int = 500):
    """Varimax rotation; returns (rotated loadings, rotation matrix)."""
    p, k = loadings.shape
    rotation = np.eye(k)
    if k < 2:
        return loadings.copy(), rotation
    var = 0.0
    for _ in range(max_iter):
        rotated = loadings @ rotation
        u, s, vt = np.linalg.svd(
            loadings.T
            @ (rotated**3 - rotated * (rotated**2).sum(axis=0) / p)
        )
        rotation = u @ vt
        new_var = s.sum()
        if new_var < var * (1 + tol):
            break
        var = new_var
    return loadings @ rotation, rotation


def _canonicalize(loadings: np.ndarray, rotation: np.ndarray):
    # Order by descending SS loadings, then flip signs so the largest
    # loading of each factor is positive; keeps repeated fits comparable.
    ss = (loadings**2).sum(axis=0)
    order = np.argsort(-ss)
    loadings = loadings[:, order]
    rotation = rotation[:, order]
    for j in range(loadings.shape[1]):
        peak = np.argmax(np.abs(loadings[:, j]))
        if loadings[peak, j] < 0:
            loadings[:, j] *= -1
            rotation[:, j] *= -1
    return loadings, rotation


def fit_factor_model(
    panel: np.ndarray,
    k: int = 5,
    variable_names: Optional[Sequence[str]] = None,
) -> FactorModel:
    """Fit a k-factor ML model with varimax rotation to a data matrix.

    `panel` is n x p with complete rows (n >= 200 enforced).  Heywood cases
    (uniqueness at the floor) are clamped to 0.005 with a warning.
    """
    panel = np.asarray(panel, dtype=float)
    n, p = panel.shape
    if n < 200:
        raise ValueError(f"need >= 200 complete rows, got {n}")
    if not np.isfinite(panel).all():
        raise ValueError("panel contains non-finite values")
    if variable_names is None:
        variable_names = [f"var{j}" for j in range(p)]

    means = panel.mean(axis=0)
    sds = panel.std(axis=0, ddof=1)
    if np.any(sds == 0):
        dead = [variable_names[j] for j in np.flatnonzero(sds == 0)]
        raise ValueError(f"constant columns cannot be factored: {dead}")
    z = (panel - means) / sds
    corr = np.corrcoef(z, rowvar=False)

    min_eig = np.linalg.eigvalsh(corr).min()
    if min_eig < -1e-8:
        raise ValueError("correlation matrix is not positive semidefinite")

    # Squared multiple correlations as starting uniquenesses.
    inv_diag = np.diag(np.linalg.pinv(corr))
    smc = 1.0 - 1.0 / np.maximum(inv_diag, 1.0)
    start = np.clip(1.0 - smc, 0.05, 1.0)

    res = minimize(
        _ml_discrepancy,
        start,
        args=(corr, k),
        method="L-BFGS-B",
        bounds=[(_MIN_UNIQUENESS, 1.0)] * p,
        options={"maxiter": 1000},
    )
    psi = np.asarray(res.x)
    if np.any(psi <= _MIN_UNIQUENESS + 1e-12):
        warnings.warn(
            "Heywood case: uniqueness clamped to 0.005 for "
            f"{[variable_names[j] for j in np.flatnonzero(psi <= _MIN_UNIQUENESS + 1e-12)]}",
            HeywoodWarning,
        )
        psi = np.maximum(psi, _MIN_UNIQUENESS)

    raw = _loadings_from_psi(psi, corr, k)
    rotated, rotation = varimax(raw)
    rotated, rotation = _canonicalize(rotated, rotation)

    ss = (rotated**2).sum(axis=0)
    proportion = ss / p
    cumulative = np.cumsum(proportion)

    # Regression (Thomson) factor scores: weights = R^{-1} Lambda.
    score_weights = np.linalg.solve(corr, rotated)

    return FactorModel(
        loadings=rotated,
        uniquenesses=psi,
        rotation=rotation,
        proportion_var=proportion,
        cumulative_var=cumulative,
        variable_names=list(variable_names),
        means=means,
        sds=sds,
        score_weights=score_weights,
    )


def score_factors(model: FactorModel, rows: np.ndarray) -> np.ndarray:
    """Regression-method factor scores for one row or a matrix of rows.

    Rows are standardized with the fit-time means and SDs, so a row at the
    variable means scores exactly zero on every factor.
    """
    rows = np.asarray(rows, dtype=float)
    single = rows.ndim == 1
    z = (np.atleast_2d(rows) - model.means) / model.sds
    scores = z @ model.score_weights
    return scores[0] if single else scores


def tucker_congruence(a: np.ndarray, b: np.ndarray) -> float:
    """Tucker's congruence coefficient between two loading vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.abs(a @ b) / np.sqrt((a @ a) * (b @ b)))


def render_factor_table(model: FactorModel, blank_threshold: float = 0.2) -> str:
    """Plain-text factor table: loadings with small values blanked, then the
    SS loadings / Proportion Var / Cumulative Var summary rows."""
    k = model.n_factors
    headers = [""] + [f"Factor{j + 1}" for j in range(k)]
    name_width = max(len(n) for n in model.variable_names + ["Proportion Var"]) + 2
    col = 10

    def fmt_row(cells):
        return cells[0].ljust(name_width) + "".join(c.rjust(col) for c in cells[1:])

    lines = [fmt_row(headers)]
    # Rows ordered by each variable's dominant factor, matching the usual
    # blocked presentation.
    dominant = np.argmax(np.abs(model.loadings), axis=1)
    peak = np.abs(model.loadings)[np.arange(len(dominant)), dominant]
    order = np.lexsort((-peak, dominant))
    for j in order:
        cells = [model.variable_names[j]]
        for f in range(k):
            value = model.loadings[j, f]
            cells.append(f"{value:.2f}" if abs(value) >= blank_threshold else "")
        lines.append(fmt_row(cells))
    lines.append("-" * (name_width + col * k))
    lines.append(fmt_row(["SS loadings"] + [f"{v:.2f}" for v in model.ss_loadings()]))
    lines.append(
        fmt_row(["Proportion Var"] + [f"{v:.2f}" for v in model.proportion_var])
    )
    lines.append(
        fmt_row(["Cumulative Var"] + [f"{v:.2f}" for v in model.cumulative_var])
    )
    return "\n".join(lines)
