"""QIC and working-correlation comparison."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import correlation as corr
from .design import Dataset, ModelFormula, build_design_matrix
from .errors import AllFailed, CrossGEEError, NonConvergence, SingularError
from .expfam import get_family

TIE_TOL = 1e-12


def quasi_likelihood(fit) -> float:
    """Independence quasi-likelihood at the fit's means and dispersion."""
    return float(np.sum(fit.family.quasi_likelihood(fit.response, fit.fitted, fit.phi)))


def qic_parts(fit, independence_fit):
    """Return ``(QL, penalty, QIC)`` with ``QIC = -2 QL + penalty``."""
    omega = np.asarray(independence_fit.model_cov, dtype=float)
    try:
        omega_inv = np.linalg.inv(omega)
    except np.linalg.LinAlgError:
        raise SingularError("independence model covariance is singular") from None
    if not np.all(np.isfinite(omega_inv)):
        raise SingularError("independence model covariance is singular")
    penalty = 2.0 * float(np.trace(omega_inv @ fit.robust_cov))
    ql = quasi_likelihood(fit)
    return ql, penalty, -2.0 * ql + penalty


def qic(fit, independence_fit) -> float:
    """``-2 QL(mu_hat; I) + 2 trace(Omega_I^-1 V_R)``."""
    return qic_parts(fit, independence_fit)[2]


@dataclass
class ComparisonRow:
    structure: str
    qic: float
    delta: float
    params: int
    converged: bool
    error: str = ""


@dataclass
class ComparisonReport:
    rows: list
    winner: str
    fits: dict = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["structure", "qic", "delta", "params", "converged"])
        for r in self.rows:
            w.writerow([r.structure, _num(r.qic), _num(r.delta), r.params, str(r.converged).lower()])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len("Structure"), *(len(r.structure) for r in self.rows))
        out = [f"{'Structure':<{width}}  {'QIC':>14}  {'dQIC':>12}  {'params':>6}  converged"]
        out.append("-" * len(out[0]))
        for r in self.rows:
            mark = " *" if r.structure == self.winner else ""
            out.append(
                f"{r.structure:<{width}}  {r.qic:>14.4f}  {r.delta:>12.4f}  {r.params:>6}  "
                f"{'yes' if r.converged else 'no'}{mark}"
            )
        return "\n".join(out) + "\n"


def _num(v):
    return repr(float(v)) if math.isfinite(v) else "nan"


def compare_structures(
    dataset: Dataset,
    formula: ModelFormula | str,
    family="gaussian",
    structures=corr.STRUCTURE_NAMES,
    options=None,
    design=None,
) -> ComparisonReport:
    """Fit every structure and rank them by QIC.

    Unconverged fits stay in the report but cannot win.  Ties within
    ``TIE_TOL`` go to fewer correlation parameters, then to list order.
    """
    from .engine import FitOptions, fit, structure_name

    if isinstance(family, str):
        family = get_family(family)
    if isinstance(formula, str):
        formula = ModelFormula.parse(formula)
    options = options or FitOptions()
    loose = FitOptions(**{**options.__dict__, "strict": False})
    structures = list(structures)
    if not structures:
        raise AllFailed("no structures to compare")
    if design is None:
        design = build_design_matrix(dataset, formula)

    try:
        ind = fit(dataset, formula, family, "independence", loose, design=design)
    except CrossGEEError as exc:
        raise AllFailed(f"independence fit failed: {exc.qualified()}") from exc

    rows, fits = [], {}
    for s in structures:
        name = structure_name(s)
        try:
            if name == "independence" and isinstance(s, str):
                f = ind
            else:
                f = fit(dataset, formula, family, s, loose, independence_fit=ind, design=design)
            fits[name] = f
            rows.append(ComparisonRow(name, f.qic, math.nan, f.n_params_corr, f.converged))
        except NonConvergence as exc:  # pragma: no cover - loose options never raise it
            fits[name] = exc.fit
            rows.append(ComparisonRow(name, exc.fit.qic, math.nan, exc.fit.n_params_corr, False))
        except CrossGEEError as exc:
            spec = corr.structure_from_name(s) if isinstance(s, str) else s
            k = corr.n_params(spec, dataset.P, dataset.L)
            rows.append(ComparisonRow(name, math.nan, math.nan, k, False, exc.qualified()))
    if not ind.converged:
        rows_ok = []
    else:
        rows_ok = [i for i, r in enumerate(rows) if r.converged and math.isfinite(r.qic)]
    if not rows_ok:
        raise AllFailed("no structure produced a converged fit")
    best = min(rows[i].qic for i in rows_ok)
    tol = TIE_TOL * max(1.0, abs(best))
    tied = [i for i in rows_ok if rows[i].qic - best <= tol]
    win = min(tied, key=lambda i: (rows[i].params, i))
    for r in rows:
        if math.isfinite(r.qic):
            r.delta = max(r.qic - best, 0.0)
    return ComparisonReport(rows, rows[win].structure, fits)
