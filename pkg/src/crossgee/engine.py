"""GEE fitting for crossover data.

The outer loop alternates one Fisher-scoring step for the regression
coefficients with moment updates of the dispersion and the working
correlation parameters:

1. ``beta <- beta + B^-1 U`` under the current working correlation,
2. dispersion from the unscaled Pearson residuals,
3. within-period parameter from pooled residual products,
4. between-period matrix from the trace-weighted residual cross moments
   (Kronecker structures only).

Data are laid out on a subject x (period, occasion) grid; missing cells are
zero-padded so every subject contributes arrays of the same shape.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import correlation as corr
from .design import Dataset, ModelFormula, build_design_matrix
from .errors import (
    DegenerateVariance,
    DegreesOfFreedomError,
    InsufficientData,
    NonConvergence,
    ParamError,
    SingularError,
)
from .expfam import Family, get_family

AR1_CLIP = 0.99
EXCH_MARGIN = 0.01


@dataclass
class FitOptions:
    tol: float = 1e-6
    max_iter: int = 200
    paper_literal_residual_scale: bool = False
    strict: bool = True  # raise NonConvergence instead of returning an unconverged fit
    backend: str | None = None


@dataclass
class ResidualMatrix:
    subject: str
    r: np.ndarray  # P x L; NaN marks a missing cell


@dataclass
class WaldRow:
    label: str
    estimate: float
    se: float
    z: float
    p: float


@dataclass
class GeeFit:
    labels: list
    coef: np.ndarray
    phi: float
    alpha1: float | None
    psi: np.ndarray | None
    working_corr: np.ndarray
    model_cov: np.ndarray
    robust_cov: np.ndarray
    iterations: int
    converged: bool
    trace: list
    fitted: np.ndarray
    response: np.ndarray
    family: Family
    structure: str
    spec: object
    n_params_corr: int
    P: int
    L: int
    n_subjects: int
    qic: float = float("nan")
    ql: float = float("nan")
    qic_penalty: float = float("nan")
    X: np.ndarray | None = field(default=None, repr=False)
    subject_index: np.ndarray | None = field(default=None, repr=False)
    cell: np.ndarray | None = field(default=None, repr=False)

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.robust_cov), 0.0, None))

    @property
    def model_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.model_cov), 0.0, None))

    def wald_table(self):
        return wald_table(self)

    def subject_terms(self):
        """Per-subject ``(D_i, V_i, y_i - mu_i)`` at the final estimates."""
        eta = self.X @ self.coef
        dmu = self.family.mean_derivative(eta)
        v = self.family.variance_function(self.fitted)
        D, V, res = [], [], []
        for i in range(self.n_subjects):
            rows = np.flatnonzero(self.subject_index == i)
            cells = self.cell[rows]
            sd = np.sqrt(v[rows])
            R = self.working_corr[np.ix_(cells, cells)]
            D.append(dmu[rows, None] * self.X[rows])
            V.append(self.phi * sd[:, None] * R * sd[None, :])
            res.append(self.response[rows] - self.fitted[rows])
        return D, V, res

    def to_dict(self) -> dict:
        rows = [
            {
                "label": w.label,
                "estimate": w.estimate,
                "robust_se": w.se,
                "robust_z": w.z,
                "p_value": w.p,
                "model_se": float(se),
            }
            for w, se in zip(self.wald_table(), self.model_se)
        ]
        return {
            "structure": self.structure,
            "family": self.family.kind,
            "link": self.family.link_name,
            "n_subjects": self.n_subjects,
            "n_observations": int(self.response.size),
            "periods": self.P,
            "occasions": self.L,
            "coefficients": rows,
            "dispersion": self.phi,
            "alpha1": self.alpha1,
            "psi": None if self.psi is None else self.psi.tolist(),
            "qic": self.qic,
            "quasi_likelihood": self.ql,
            "qic_penalty": self.qic_penalty,
            "correlation_params": self.n_params_corr,
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": list(self.trace),
            "model_cov": self.model_cov.tolist(),
            "robust_cov": self.robust_cov.tolist(),
            "fitted": self.fitted.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2) + "\n"


def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# -- residuals and moment estimators --------------------------------------


def estimate_dispersion(y, mu, family: Family, p: int) -> float:
    """Pearson chi-square over ``N - p``."""
    y = np.asarray(y, dtype=float)
    N = y.size
    if N <= p:
        raise DegreesOfFreedomError(f"need more observations than coefficients (N={N}, p={p})")
    v = family.variance_function(mu)
    if np.any(v <= 0):
        raise DegenerateVariance("variance function vanished at a fitted mean")
    return float(np.sum((y - mu) ** 2 / v) / (N - p))


def _residual_grid(dataset_or_index, y, mu, phi, family, literal=False, n=None, P=None, L=None):
    if isinstance(dataset_or_index, Dataset):
        ds = dataset_or_index
        sub, pidx, oidx = ds.subject_index, ds.period_index, ds.occasion_index
        n, P, L = ds.n, ds.P, ds.L
    else:
        sub, pidx, oidx = dataset_or_index
    if not phi > 0:
        raise DegenerateVariance(f"dispersion estimate is {phi!r}; Pearson residuals are undefined")
    v = family.variance_function(mu)
    if np.any(v <= 0):
        raise DegenerateVariance("variance function vanished at a fitted mean")
    scale = phi * np.sqrt(v) if literal else np.sqrt(phi * v)
    grid = np.full((n, P, L), np.nan)
    grid[sub, pidx, oidx] = (np.asarray(y, dtype=float) - mu) / scale
    return grid


def pearson_residuals(dataset: Dataset, mu, phi: float, family: Family, literal: bool = False):
    """Pearson residuals arranged per subject as P x L matrices."""
    grid = _residual_grid(dataset, dataset.response, np.asarray(mu, dtype=float), phi, family, literal)
    return [ResidualMatrix(s, grid[i]) for i, s in enumerate(dataset.subjects)]


def _as_grid(residuals) -> np.ndarray:
    if isinstance(residuals, np.ndarray):
        grid = residuals.astype(float)
    else:
        grid = np.stack([np.asarray(r.r if isinstance(r, ResidualMatrix) else r, dtype=float) for r in residuals])
    if grid.ndim == 2:
        grid = grid[:, None, :]
    if grid.ndim != 3:
        raise ParamError("residuals must be a sequence of P x L matrices")
    return grid


def _within_kind(within) -> str:
    if isinstance(within, str):
        key = within.lower()
    elif isinstance(within, corr.Exchangeable):
        key = "exchangeable"
    elif isinstance(within, corr.AR1):
        key = "ar1"
    else:
        key = type(within).__name__.lower()
    if key in ("exch", "exchangeable"):
        return "exchangeable"
    if key == "ar1":
        return "ar1"
    raise ParamError(f"no within-period parameter to estimate for {within!r}")


def alpha_bounds(kind: str, dim: int):
    if kind == "ar1":
        return -AR1_CLIP, AR1_CLIP
    lo = -1.0 / (dim - 1) + EXCH_MARGIN if dim > 1 else -AR1_CLIP
    return lo, AR1_CLIP


def raw_alpha1(residuals, within) -> float:
    """Pooled within-period residual product mean, before clipping."""
    grid = _as_grid(residuals)
    kind = _within_kind(within)
    ok = ~np.isnan(grid)
    r = np.where(ok, grid, 0.0)
    if kind == "exchangeable":
        s = r.sum(axis=2)
        ss = (r * r).sum(axis=2)
        c = ok.sum(axis=2)
        total = float(np.sum((s * s - ss) / 2.0))
        pairs = int(np.sum(c * (c - 1) // 2))
    else:
        prod = r[:, :, 1:] * r[:, :, :-1]
        both = ok[:, :, 1:] & ok[:, :, :-1]
        total = float(np.sum(prod[both]))
        pairs = int(both.sum())
    if pairs == 0:
        raise InsufficientData("no within-period residual pairs; need at least two occasions per period")
    return total / pairs


def estimate_alpha1(residuals, within) -> float:
    """Moment estimate of the within-period correlation parameter.

    Exchangeable uses every pair of occasions inside a period; AR1 uses
    adjacent occasions only.  The result is clipped to the admissible range.
    """
    grid = _as_grid(residuals)
    kind = _within_kind(within)
    lo, hi = alpha_bounds(kind, grid.shape[2])
    return float(np.clip(raw_alpha1(grid, kind), lo, hi))


def psi_moments(residuals, R1, backend=None) -> np.ndarray:
    """Raw between-period moment matrix, diagonal included.

    ``Q[j, j'] = mean_i tr(R1 (r_ij - rbar_j)(r_ij' - rbar_j')^T)``.
    """
    grid = _as_grid(residuals)
    if np.isnan(grid).any():
        raise InsufficientData("between-period estimation needs complete residual matrices")
    n = grid.shape[0]
    if n < 2:
        raise InsufficientData("between-period estimation needs at least two subjects")
    R1 = np.asarray(R1, dtype=float)
    if R1.shape != (grid.shape[2], grid.shape[2]):
        raise ParamError(f"within-period matrix must be {grid.shape[2]}x{grid.shape[2]}")
    C = grid - grid.mean(axis=0)
    return _kernels.psi_moments(C, R1, backend) / n


def estimate_psi(residuals, R1, backend=None) -> np.ndarray:
    """Between-period correlation matrix, normalised to unit diagonal and projected to PSD."""
    grid = _as_grid(residuals)
    Q = psi_moments(grid, R1, backend)
    Q = 0.5 * (Q + Q.T)
    d = np.diag(Q).copy()
    # relative floor: centred residuals that vanish up to rounding count as zero
    floor = 1e-12 * float(np.mean(grid**2)) * np.trace(np.asarray(R1, dtype=float))
    if np.any(d <= floor):
        j = int(np.argmin(d))
        raise DegenerateVariance(f"between-period moment for period index {j} is {d[j]:.3g}")
    psi = Q / np.sqrt(np.outer(d, d))
    np.fill_diagonal(psi, 1.0)
    return corr.project_to_psd(psi)


def estimate_unstructured(residuals) -> tuple:
    grid = _as_grid(residuals)
    n = grid.shape[0]
    flat = grid.reshape(n, -1)
    ok = ~np.isnan(flat)
    r = np.where(ok, flat, 0.0)
    cnt = ok.T.astype(float) @ ok.astype(float)
    if np.any(cnt == 0):
        raise InsufficientData("some pairs of cells are never observed together")
    S = (r.T @ r) / cnt
    d = np.sqrt(np.diag(S))
    if np.any(d == 0):
        raise DegenerateVariance("a cell has zero residual variance")
    R = corr.project_to_psd(S / np.outer(d, d))
    rows, cols = np.tril_indices(R.shape[0], -1)
    return tuple(R[rows, cols])


# -- covariance -----------------------------------------------------------


def sandwich_covariance(D, V, residuals) -> np.ndarray:
    """``B^-1 M B^-1`` from per-subject derivative matrices, working covariances and residuals."""
    p = np.asarray(D[0]).shape[1]
    B = np.zeros((p, p))
    M = np.zeros((p, p))
    for Di, Vi, ri in zip(D, V, residuals):
        Di = np.asarray(Di, dtype=float)
        VinvD = np.linalg.solve(np.asarray(Vi, dtype=float), Di)
        B += Di.T @ VinvD
        s = VinvD.T @ np.asarray(ri, dtype=float)
        M += np.outer(s, s)
    Binv = _inv(B, "information matrix")
    out = Binv @ M @ Binv
    return 0.5 * (out + out.T)


def _inv(B, name):
    d = np.sqrt(np.abs(np.diag(B)))
    if np.any(d == 0) or not np.all(np.isfinite(B)):
        raise SingularError(f"{name} is singular")
    cond = np.linalg.cond(B / np.outer(d, d))
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularError(f"{name} is singular (condition number {cond:.3g})")
    out = np.linalg.inv(B)
    return 0.5 * (out + out.T)


def _normal_sf2(z):
    return math.erfc(abs(z) / math.sqrt(2.0))


def wald_table(fit: GeeFit):
    """Estimate, robust SE, z and two-sided normal p-value per coefficient."""
    rows = []
    for lab, b, se in zip(fit.labels, fit.coef, fit.robust_se):
        b, se = float(b), float(se)
        if se > 0:
            z = b / se
        else:
            z = 0.0 if b == 0 else math.copysign(math.inf, b)
        p = 1.0 if z == 0 else _normal_sf2(z)
        rows.append(WaldRow(lab, b, se, z, p))
    return rows


# -- fitting ----------------------------------------------------------------


class _Grid:
    """Subject x cell padding of the long-format arrays."""

    def __init__(self, dataset: Dataset, X: np.ndarray):
        self.n, self.P, self.L = dataset.n, dataset.P, dataset.L
        self.m = self.P * self.L
        self.sub = dataset.subject_index
        self.cell = dataset.cell
        self.pidx = dataset.period_index
        self.oidx = dataset.occasion_index
        mask = np.zeros((self.n, self.m), dtype=bool)
        mask[self.sub, self.cell] = True
        self.mask = mask
        self.patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
        self.pattern = np.asarray(inverse, dtype=np.int64).reshape(-1)
        self.balanced = bool(mask.all())
        self.Xp = np.zeros((self.n, self.m, X.shape[1]))
        self.Xp[self.sub, self.cell] = X

    def pad(self, values):
        out = np.zeros((self.n, self.m))
        out[self.sub, self.cell] = values
        return out

    def inverses(self, spec, R):
        k = self.patterns.shape[0]
        out = np.zeros((k, self.m, self.m))
        if isinstance(spec, corr.Independence):
            for g in range(k):
                out[g][np.diag_indices(self.m)] = self.patterns[g]
            return out
        if self.balanced and isinstance(spec, corr.Kronecker):
            out[0] = corr.factored_inverse(corr.between_matrix(spec, self.P), corr.within_matrix(spec, self.L))
            return out
        for g in range(k):
            idx = np.flatnonzero(self.patterns[g])
            out[g][np.ix_(idx, idx)] = corr.spd_inverse(R[np.ix_(idx, idx)])
        return out


def structure_name(spec) -> str:
    if isinstance(spec, str):
        return spec.strip().lower()
    if isinstance(spec, corr.Independence):
        return "independence"
    if isinstance(spec, corr.Exchangeable):
        return "exch_full"
    if isinstance(spec, corr.AR1):
        return "ar1_full"
    if isinstance(spec, corr.Unstructured):
        return "unstructured"
    w = {corr.AR1: "ar1", corr.Exchangeable: "exch", corr.Independence: "indep"}[type(spec.within)]
    if spec.estimate_between:
        return f"kron_{w}"
    if spec.between is None:
        return {"ar1": "ar1", "exch": "exchangeable", "indep": "independence"}[w]
    return f"fixed_{w}"


def _resolve_structure(structure):
    if isinstance(structure, str):
        return structure_name(structure), corr.structure_from_name(structure)
    return structure_name(structure), structure


def _initial_spec(spec, P, L):
    """Starting values: zero within-period parameter, identity between-period matrix."""
    if isinstance(spec, corr.Kronecker):
        within = spec.within
        if not isinstance(within, corr.Independence):
            within = type(within)(0.0)
        between = None if spec.estimate_between else spec.between
        return corr.Kronecker(within, between, spec.estimate_between)
    if isinstance(spec, (corr.Exchangeable, corr.AR1)):
        return type(spec)(0.0)
    if isinstance(spec, corr.Unstructured):
        m = P * L
        return corr.Unstructured((0.0,) * (m * (m - 1) // 2))
    return spec


def _has_params(spec) -> bool:
    if isinstance(spec, corr.Kronecker):
        return spec.estimate_between or not isinstance(spec.within, corr.Independence)
    return not isinstance(spec, corr.Independence)


def _update_spec(spec, grid_r, P, L):
    if isinstance(spec, corr.Kronecker):
        alpha = None
        if not isinstance(spec.within, corr.Independence):
            alpha = estimate_alpha1(grid_r, spec.within)
        spec = corr.with_params(spec, alpha=alpha)
        if spec.estimate_between:
            psi = estimate_psi(grid_r, corr.within_matrix(spec, L))
            spec = corr.with_params(spec, between=psi)
        return spec
    flat = grid_r.reshape(grid_r.shape[0], 1, -1)
    if isinstance(spec, (corr.Exchangeable, corr.AR1)):
        return corr.with_params(spec, alpha=estimate_alpha1(flat, spec))
    if isinstance(spec, corr.Unstructured):
        return corr.with_params(spec, params=estimate_unstructured(grid_r))
    return spec


def _wls_start(X, y, family: Family):
    mu0 = family.initial_mean(y)
    eta0 = family.link(mu0)
    dmu0 = family.mean_derivative(eta0)
    v0 = family.variance_function(mu0)
    z = eta0 + (y - mu0) / dmu0
    w = np.sqrt(dmu0**2 / v0)
    beta, *_ = np.linalg.lstsq(X * w[:, None], z * w, rcond=None)
    return beta


def fit(
    dataset: Dataset,
    formula: ModelFormula | str,
    family: Family | str = "gaussian",
    structure="independence",
    options: FitOptions | None = None,
    independence_fit: GeeFit | None = None,
    design=None,
) -> GeeFit:
    """Fit a marginal model by GEE.

    Parameters
    ----------
    dataset : Dataset
    formula : ModelFormula or str
    family : Family or str
    structure : str or correlation structure
        A name from :data:`crossgee.correlation.STRUCTURE_NAMES` or a
        structure instance.
    options : FitOptions, optional
    independence_fit : GeeFit, optional
        A converged independence fit on the same data and formula.  Used for
        the starting values and the QIC penalty; computed when omitted.
    design : tuple, optional
        Precomputed ``(X, labels)`` matching ``formula``.

    Returns
    -------
    GeeFit
    """
    options = options or FitOptions()
    if isinstance(family, str):
        family = get_family(family)
    if isinstance(formula, str):
        formula = ModelFormula.parse(formula)
    X, labels = design if design is not None else build_design_matrix(dataset, formula)
    name, spec = _resolve_structure(structure)
    if corr.needs_balance(spec):
        dataset.require_balance(f"structure {name!r}")
    y = family.check_response(dataset.response)
    N, p = X.shape
    if N <= p:
        raise DegreesOfFreedomError(f"need more observations than coefficients (N={N}, p={p})")

    is_indep = isinstance(spec, corr.Independence)
    if not is_indep and independence_fit is None:
        independence_fit = fit(dataset, formula, family, "independence", options, design=(X, labels))

    grid = _Grid(dataset, X)
    P, L = grid.P, grid.L
    if is_indep:
        beta = _wls_start(X, y, family)
    else:
        beta = independence_fit.coef.copy()
    spec = _initial_spec(spec, P, L)
    has_params = _has_params(spec)
    backend = options.backend

    def state(b):
        eta = X @ b
        mu = family.inverse_link(eta)
        dmu = family.mean_derivative(eta)
        v = family.variance_function(mu)
        if np.any(v <= 0):
            raise DegenerateVariance("variance function vanished at a fitted mean")
        sd = np.sqrt(v)
        Et = grid.pad(dmu / sd)[:, :, None] * grid.Xp
        e = grid.pad((y - mu) / sd)
        return mu, Et, e

    trace = []
    converged = False
    it = 0
    phi = float("nan")
    for it in range(1, options.max_iter + 1):
        R = corr.build(spec, P, L)
        rinv = grid.inverses(spec, R)
        _, Et, e = state(beta)
        B, U, _ = _kernels.gee_sums(Et, e, rinv, grid.pattern, backend)
        delta = _inv(B, "scoring matrix") @ U
        beta = beta + delta
        trace.append(float(np.max(np.abs(delta))))
        rel = float(np.max(np.abs(delta) / (np.abs(beta) + 1.0)))
        mu, _, _ = state(beta)
        phi = estimate_dispersion(y, mu, family, p)
        if has_params:
            r = _residual_grid(
                (grid.sub, grid.pidx, grid.oidx), y, mu, phi, family,
                options.paper_literal_residual_scale, grid.n, P, L,
            )
            spec = _update_spec(spec, r, P, L)
        # the first pass of a correlated structure runs under the identity
        if rel < options.tol and (it >= 2 or not has_params):
            converged = True
            break

    R = corr.build(spec, P, L)
    rinv = grid.inverses(spec, R)
    mu, Et, e = state(beta)
    B, _, M = _kernels.gee_sums(Et, e, rinv, grid.pattern, backend)
    Binv = _inv(B, "information matrix")
    model_cov = phi * Binv
    robust_cov = Binv @ M @ Binv
    robust_cov = 0.5 * (robust_cov + robust_cov.T)

    alpha1 = None
    psi = None
    if isinstance(spec, corr.Kronecker):
        if not isinstance(spec.within, corr.Independence):
            alpha1 = float(spec.within.alpha)
        psi = corr.between_matrix(spec, P)
    elif isinstance(spec, (corr.Exchangeable, corr.AR1)):
        alpha1 = float(spec.alpha)

    result = GeeFit(
        labels=list(labels),
        coef=beta,
        phi=phi,
        alpha1=alpha1,
        psi=psi,
        working_corr=R,
        model_cov=model_cov,
        robust_cov=robust_cov,
        iterations=it,
        converged=converged,
        trace=trace,
        fitted=mu,
        response=y,
        family=family,
        structure=name,
        spec=spec,
        n_params_corr=corr.n_params(spec, P, L),
        P=P,
        L=L,
        n_subjects=grid.n,
        X=X,
        subject_index=grid.sub,
        cell=grid.cell,
    )
    from .selection import qic_parts

    ind = result if is_indep else independence_fit
    result.ql, result.qic_penalty, result.qic = qic_parts(result, ind)
    if not converged and options.strict:
        raise NonConvergence(
            f"{name} fit did not converge in {options.max_iter} iterations "
            f"(last max |delta beta| = {trace[-1]:.3g})",
            fit=result,
            trace=trace,
        )
    return result


def coefficients_csv(fit: GeeFit) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "estimate", "robust_se", "robust_z", "p_value", "model_se"])
    for row, se in zip(fit.wald_table(), fit.model_se):
        w.writerow([row.label] + [repr(float(v)) for v in (row.estimate, row.se, row.z, row.p, se)])
    return buf.getvalue()


def matrix_csv(M) -> str:
    M = np.asarray(M, dtype=float)
    return "\n".join(",".join(repr(float(v)) for v in row) for row in M) + "\n"
