"""Log-likelihood, score vector, Fisher information and MLE fitting.

The likelihood separates over nodes, so the score and information are
assembled block by block and the information matrix is exactly zero outside
the diagonal blocks. All functions accept either a PatientData batch or an
iterable of PatientRecord.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import FitError, ModelConfigError, SeparationError, SingularMatrixError
from .model import (
    CovariateModel,
    DagModelSpec,
    PatientData,
    ParamVector,
    as_patient_data,
    enumerate_patients,
    node_designs,
)


def _complete_data(records) -> PatientData:
    data = as_patient_data(records)
    if (data.y < 0).any():
        raise ModelConfigError("records must be complete (no missing outcomes)")
    return data


def node_design_matrix(spec: DagModelSpec, data: PatientData, node_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix U_v and response column for one node."""
    design = node_designs(spec)[node_index]
    n = len(data)
    cols = [np.ones(n)]
    xf, zf, yf = data.x.astype(float), data.z.astype(float), data.y.astype(float)
    cols.extend(xf[:, c] for c in design.x_cols)
    cols.extend(yf[:, c] for c in design.y_cols)
    cols.extend(zf[:, c] for c in design.z_cols)
    return np.column_stack(cols), yf[:, design.node_index]


def log_likelihood(spec: DagModelSpec, params: ParamVector, records) -> float:
    """Joint log-likelihood over all nodes and records, overflow safe."""
    data = _complete_data(records)
    total = 0.0
    for vi in range(spec.n_nodes):
        u, y = node_design_matrix(spec, data, vi)
        eta = u @ params.values[node_designs(spec)[vi].param_indices]
        # y*eta - log(1 + exp(eta)), with the log-sum computed stably
        total += float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return total


def per_record_scores(spec: DagModelSpec, params: ParamVector, records) -> np.ndarray:
    """Matrix of per-patient score vectors, one row per record."""
    data = _complete_data(records)
    out = np.zeros((len(data), len(params)))
    for vi in range(spec.n_nodes):
        design = node_designs(spec)[vi]
        u, y = node_design_matrix(spec, data, vi)
        mu = expit(u @ params.values[design.param_indices])
        out[:, design.param_indices] = u * (y - mu)[:, None]
    return out


def score(spec: DagModelSpec, params: ParamVector, records) -> np.ndarray:
    """Score vector: sum over records of u_v (y_v - mu_v), per coefficient."""
    data = _complete_data(records)
    out = np.zeros(len(params))
    for vi in range(spec.n_nodes):
        design = node_designs(spec)[vi]
        u, y = node_design_matrix(spec, data, vi)
        mu = expit(u @ params.values[design.param_indices])
        out[design.param_indices] = u.T @ (y - mu)
    return out


def _weighted_information(
    spec: DagModelSpec, params: ParamVector, data: PatientData, weights: np.ndarray | None
) -> np.ndarray:
    p = len(params)
    out = np.zeros((p, p))
    for vi in range(spec.n_nodes):
        design = node_designs(spec)[vi]
        u, _ = node_design_matrix(spec, data, vi)
        mu = expit(u @ params.values[design.param_indices])
        w = mu * (1.0 - mu)
        if weights is not None:
            w = w * weights
        block = u.T @ (u * w[:, None])
        out[np.ix_(design.param_indices, design.param_indices)] = block
    return out


def fisher_information(spec: DagModelSpec, params: ParamVector, records) -> np.ndarray:
    """Observed information: block diagonal sum of u u' mu (1 - mu)."""
    return _weighted_information(spec, params, _complete_data(records), None)


@dataclass(frozen=True)
class ScoreCovariance:
    """Per-patient score covariance with how it was obtained."""

    values: np.ndarray
    mode: str  # "exact" or "monte-carlo"
    mc_se: np.ndarray | None = None
    mc_samples: int = 0


def expected_score_covariance(
    spec: DagModelSpec,
    params: ParamVector,
    covariates: CovariateModel,
    enum_limit: int = 16,
    mc_fallback: bool = False,
    mc_samples: int = 100_000,
    seed: int = 0,
) -> ScoreCovariance:
    """Expected per-patient information over the joint law of (x, z, y).

    Small models are enumerated exactly; above ``enum_limit`` binary
    variables a Monte Carlo average over sampled patients is used when
    ``mc_fallback`` is set, with an entrywise standard error estimate.
    """
    n_binary = len(spec.covariate_names) + spec.n_nodes
    if n_binary <= enum_limit:
        data, probs = enumerate_patients(spec, params, covariates, limit=enum_limit)
        return ScoreCovariance(values=_weighted_information(spec, params, data, probs), mode="exact")
    if not mc_fallback:
        raise ModelConfigError(
            f"model has {n_binary} binary variables, above the enumeration limit of "
            f"{enum_limit}; enable mc_fallback to use Monte Carlo"
        )
    if mc_samples < 100_000:
        mc_samples = 100_000
    from .mc import PatientGenerator, sample_patients

    gen = PatientGenerator(spec=spec, params=params, covariates=covariates)
    data = sample_patients(gen, mc_samples, seed)
    p = len(params)
    mean = np.zeros((p, p))
    second = np.zeros((p, p))
    for vi in range(spec.n_nodes):
        design = node_designs(spec)[vi]
        u, _ = node_design_matrix(spec, data, vi)
        mu = expit(u @ params.values[design.param_indices])
        w = mu * (1.0 - mu)
        idx = np.ix_(design.param_indices, design.param_indices)
        mean[idx] = u.T @ (u * w[:, None]) / mc_samples
        u2 = u * u
        second[idx] = u2.T @ (u2 * (w * w)[:, None]) / mc_samples
    se = np.sqrt(np.maximum(second - mean * mean, 0.0) / mc_samples)
    return ScoreCovariance(values=mean, mode="monte-carlo", mc_se=se, mc_samples=mc_samples)


def empirical_score_covariance(spec: DagModelSpec, params: ParamVector, records) -> ScoreCovariance:
    """Average observed per-patient information over a reference sample."""
    data = _complete_data(records)
    info = _weighted_information(spec, params, data, None) / len(data)
    return ScoreCovariance(values=info, mode="empirical", mc_samples=len(data))


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------

SEPARATION_THRESHOLD = 15.0


@dataclass(frozen=True)
class NodeFitReport:
    node_id: str
    iterations: int
    converged: bool
    score_max: float


@dataclass(frozen=True)
class FitResult:
    params: ParamVector
    info: np.ndarray
    std_errors: np.ndarray
    node_reports: tuple[NodeFitReport, ...]
    log_likelihood: float

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.node_reports)

    def std_error(self, name: str) -> float:
        return float(self.std_errors[self.params.index_map[name]])


def _node_loglik(u: np.ndarray, y: np.ndarray, theta: np.ndarray) -> float:
    eta = u @ theta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _fit_node(node_id: str, u: np.ndarray, y: np.ndarray, theta0: np.ndarray, tol: float, max_iter: int):
    """Newton iterations with step halving for one node's block."""
    theta = theta0.copy()
    ll = _node_loglik(u, y, theta)
    for it in range(1, max_iter + 1):
        mu = expit(u @ theta)
        grad = u.T @ (y - mu)
        gmax = float(np.max(np.abs(grad)))
        if gmax < tol:
            return theta, NodeFitReport(node_id, it - 1, True, gmax)
        if float(np.max(np.abs(theta))) > SEPARATION_THRESHOLD:
            raise SeparationError(
                f"node {node_id}: coefficients exceed {SEPARATION_THRESHOLD} with score "
                f"max-norm {gmax:.3g}; data are (quasi-)separated"
            )
        w = mu * (1.0 - mu)
        info = u.T @ (u * w[:, None])
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise FitError(f"node {node_id}: singular information matrix during fitting") from None
        for _ in range(30):
            ll_new = _node_loglik(u, y, theta + step)
            if ll_new >= ll:
                break
            step = step / 2.0
        theta = theta + step
        ll = ll_new
    mu = expit(u @ theta)
    gmax = float(np.max(np.abs(u.T @ (y - mu))))
    if gmax >= tol:
        raise FitError(f"node {node_id}: no convergence in {max_iter} Newton iterations (score {gmax:.3g})")
    return theta, NodeFitReport(node_id, max_iter, True, gmax)


def fit_mle(
    spec: DagModelSpec,
    records,
    params_init: ParamVector | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> FitResult:
    """Fit all node blocks independently by Newton's method.

    Raises FitError on non-convergence and SeparationError when a block's
    coefficients diverge, naming the offending node.
    """
    data = _complete_data(records)
    if len(data) < 1:
        raise FitError("at least one record is required")
    if params_init is None:
        template = ParamVector.for_spec(spec, {n: 0.0 for node in spec.nodes for n in node.coef_names()})
    else:
        template = params_init
    values = template.values.copy()
    reports = []
    for vi, node in enumerate(spec.nodes):
        design = node_designs(spec)[vi]
        u, y = node_design_matrix(spec, data, vi)
        theta, report = _fit_node(node.id, u, y, values[design.param_indices], tol, max_iter)
        values[design.param_indices] = theta
        reports.append(report)
    params = template.with_values(values)
    info = fisher_information(spec, params, data)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise FitError("information matrix at the MLE is singular") from None
    return FitResult(
        params=params,
        info=info,
        std_errors=np.sqrt(np.diag(cov)),
        node_reports=tuple(reports),
        log_likelihood=log_likelihood(spec, params, data),
    )


# ---------------------------------------------------------------------------
# Standardized cumulative scores
# ---------------------------------------------------------------------------


def inverse_sqrt_psd(mat: np.ndarray, rel_eps: float = 1e-10) -> np.ndarray:
    """Symmetric inverse square root via eigendecomposition.

    Eigenvalues below rel_eps times the largest raise SingularMatrixError
    rather than being pseudo-inverted.
    """
    mat = np.asarray(mat, dtype=float)
    evals, evecs = np.linalg.eigh(mat)
    cutoff = rel_eps * float(evals[-1])
    if evals[0] <= cutoff:
        raise SingularMatrixError(
            f"matrix is numerically singular (min eigenvalue {evals[0]:.3g}, max {evals[-1]:.3g})"
        )
    return (evecs / np.sqrt(evals)) @ evecs.T


def standardized_cumulative_score(
    spec: DagModelSpec,
    params0: ParamVector,
    records,
    t: int | None = None,
    info: np.ndarray | None = None,
) -> np.ndarray:
    """Cumulative standardized score path, an offline baseline diagnostic.

    Returns I^{-1/2} n^{-1/2} sum_{i<=t} S_i. With ``t=None`` the whole
    (n, p) path is returned. ``info`` defaults to the average observed
    per-patient information over the supplied records.
    """
    data = _complete_data(records)
    n = len(data)
    scores = per_record_scores(spec, params0, data)
    if info is None:
        info = fisher_information(spec, params0, data) / n
    root = inverse_sqrt_psd(info)
    path = np.cumsum(scores, axis=0) @ root.T / np.sqrt(n)
    if t is None:
        return path
    if not 0 <= t <= n:
        raise ModelConfigError(f"t must lie in [0, {n}], got {t}")
    if t == 0:
        return np.zeros(scores.shape[1])
    return path[t - 1]
