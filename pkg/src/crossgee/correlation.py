"""Working correlation structures.

Structures are small frozen dataclasses; :func:`build` materialises them as
dense correlation matrices over the ``P * L`` observations of one subject,
ordered period-major (all occasions of period 1, then period 2, ...).

Exchangeable, AR1 and Unstructured act on the whole ``P * L`` block when used
on their own.  :class:`Kronecker` composes a between-period matrix with a
within-period structure over ``L`` occasions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParamError, PsdError, SingularError

PSD_TOL = 1e-8
PD_TOL = 1e-10
CLIP_FLOOR = 1e-8


@dataclass(frozen=True)
class Independence:
    n_params = 0


@dataclass(frozen=True)
class Exchangeable:
    alpha: float = 0.0
    n_params = 1


@dataclass(frozen=True)
class AR1:
    alpha: float = 0.0
    n_params = 1


@dataclass(frozen=True)
class Unstructured:
    """Free correlation matrix stored as its strict lower triangle (row-major)."""

    params: tuple = ()

    @property
    def n_params(self):
        return len(self.params)


@dataclass(frozen=True)
class Kronecker:
    """``between (P x P) kron within (L x L)``.

    ``between=None`` stands for the identity.  When ``estimate_between`` is
    false the between-period matrix is held fixed during fitting, which is how
    the ``I_P kron AR(1)_L`` and ``I_P kron Exch_L`` structures are expressed.
    """

    within: Independence | Exchangeable | AR1 = field(default_factory=Independence)
    between: np.ndarray | None = field(default=None, compare=False)
    estimate_between: bool = True

    def n_params_for(self, P: int) -> int:
        k = self.within.n_params
        if self.estimate_between:
            k += P * (P - 1) // 2
        return k


WorkingCorrelation = Independence | Exchangeable | AR1 | Unstructured | Kronecker

STRUCTURE_NAMES = (
    "independence",
    "ar1",
    "exchangeable",
    "ar1_full",
    "exch_full",
    "kron_ar1",
    "kron_exch",
)
EXTRA_NAMES = ("kron_indep", "unstructured")


def structure_from_name(name: str) -> WorkingCorrelation:
    """Map a CLI structure identifier to an initial structure.

    ``ar1`` and ``exchangeable`` are within-period structures with the
    between-period matrix fixed at the identity; the ``_full`` variants span
    every observation of a subject.
    """
    key = name.strip().lower()
    table = {
        "independence": lambda: Independence(),
        "ar1": lambda: Kronecker(AR1(), estimate_between=False),
        "exchangeable": lambda: Kronecker(Exchangeable(), estimate_between=False),
        "ar1_full": lambda: AR1(),
        "exch_full": lambda: Exchangeable(),
        "kron_ar1": lambda: Kronecker(AR1()),
        "kron_exch": lambda: Kronecker(Exchangeable()),
        "kron_indep": lambda: Kronecker(Independence()),
        "unstructured": lambda: Unstructured(),
    }
    if key not in table:
        raise ParamError(
            f"unknown correlation structure {name!r}; expected one of "
            f"{STRUCTURE_NAMES + EXTRA_NAMES}"
        )
    return table[key]()


def n_params(spec: WorkingCorrelation, P: int, L: int) -> int:
    """Number of free correlation parameters of ``spec`` for a P x L layout."""
    if isinstance(spec, Kronecker):
        return spec.n_params_for(P)
    if isinstance(spec, Unstructured):
        m = P * L
        return m * (m - 1) // 2
    return spec.n_params


def needs_balance(spec: WorkingCorrelation) -> bool:
    return isinstance(spec, Kronecker)


# -- validation -----------------------------------------------------------


def check_corr_matrix(M, name: str = "matrix", psd: bool = True) -> np.ndarray:
    """Validate a correlation matrix; returns it as a float array."""
    M = np.array(M, dtype=float, ndmin=2)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ParamError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ParamError(f"{name} has non-finite entries")
    if np.max(np.abs(M - M.T)) > 1e-12:
        raise ParamError(f"{name} is not symmetric")
    if np.max(np.abs(np.diag(M) - 1.0)) > 1e-12:
        raise ParamError(f"{name} must have unit diagonal")
    if np.max(np.abs(M)) > 1.0 + 1e-12:
        raise ParamError(f"{name} has entries outside [-1, 1]")
    if psd:
        lam = np.linalg.eigvalsh(M)[0]
        if lam < -PSD_TOL:
            raise PsdError(f"{name} is not positive semidefinite (smallest eigenvalue {lam:.3g})")
    return M


def _check_alpha(spec, dim: int):
    a = spec.alpha
    if not np.isfinite(a):
        raise ParamError(f"{type(spec).__name__} parameter must be finite")
    if isinstance(spec, AR1):
        if not abs(a) < 1:
            raise ParamError(f"AR1 requires |alpha| < 1, got {a}")
    elif dim > 1:
        lo = -1.0 / (dim - 1)
        if not lo < a < 1:
            raise ParamError(f"Exchangeable over {dim} requires {lo:.4g} < alpha < 1, got {a}")


# -- construction ---------------------------------------------------------


def _simple(spec, dim: int) -> np.ndarray:
    if isinstance(spec, Independence):
        return np.eye(dim)
    if isinstance(spec, Exchangeable):
        _check_alpha(spec, dim)
        M = np.full((dim, dim), float(spec.alpha))
        np.fill_diagonal(M, 1.0)
        return M
    if isinstance(spec, AR1):
        _check_alpha(spec, dim)
        lag = np.abs(np.subtract.outer(np.arange(dim), np.arange(dim)))
        return float(spec.alpha) ** lag
    if isinstance(spec, Unstructured):
        return unstructured_matrix(spec.params, dim)
    raise ParamError(f"unsupported structure {spec!r}")


def unstructured_matrix(params, dim: int) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    need = dim * (dim - 1) // 2
    if params.size != need:
        raise ParamError(f"Unstructured over {dim} needs {need} parameters, got {params.size}")
    M = np.eye(dim)
    rows, cols = np.tril_indices(dim, -1)
    M[rows, cols] = params
    M[cols, rows] = params
    return check_corr_matrix(M, "unstructured correlation")


def within_matrix(spec: Kronecker, L: int) -> np.ndarray:
    return _simple(spec.within, L)


def between_matrix(spec: Kronecker, P: int) -> np.ndarray:
    if spec.between is None:
        return np.eye(P)
    psi = check_corr_matrix(spec.between, "between-period matrix")
    if psi.shape != (P, P):
        raise ParamError(f"between-period matrix must be {P}x{P}, got {psi.shape}")
    return psi


def build(spec: WorkingCorrelation, P: int, L: int) -> np.ndarray:
    """Materialise ``spec`` as a ``P*L x P*L`` correlation matrix."""
    if P < 1 or L < 1:
        raise ParamError("P and L must be positive")
    if isinstance(spec, Kronecker):
        return kronecker(between_matrix(spec, P), within_matrix(spec, L))
    return _simple(spec, P * L)


def kronecker(A, B) -> np.ndarray:
    """Kronecker product of two correlation matrices; block ``(j, j')`` is ``A[j, j'] * B``."""
    A = check_corr_matrix(A, "left factor")
    B = check_corr_matrix(B, "right factor")
    return np.kron(A, B)


def _spd_inverse(M: np.ndarray, name: str) -> np.ndarray:
    lam, vec = np.linalg.eigh(M)
    if lam[0] <= PD_TOL:
        raise SingularError(f"{name} is singular or not positive definite (smallest eigenvalue {lam[0]:.3g})")
    inv = (vec / lam) @ vec.T
    return 0.5 * (inv + inv.T)


def factored_inverse(psi, r1) -> np.ndarray:
    """Inverse of ``psi kron r1`` computed as ``inv(psi) kron inv(r1)``."""
    psi = np.asarray(psi, dtype=float)
    r1 = np.asarray(r1, dtype=float)
    return np.kron(_spd_inverse(psi, "between-period factor"), _spd_inverse(r1, "within-period factor"))


def spd_inverse(M, name: str = "working correlation") -> np.ndarray:
    return _spd_inverse(np.asarray(M, dtype=float), name)


def project_to_psd(M, floor: float = CLIP_FLOOR) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale to unit diagonal.

    Matrices that are already unit-diagonal and PSD come back unchanged, so
    the map is idempotent.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    lam, vec = np.linalg.eigh(M)
    if lam[0] >= 0.0 and np.allclose(np.diag(M), 1.0, rtol=0, atol=1e-14):
        out = M.copy()
        np.fill_diagonal(out, 1.0)
        return out
    A = (vec * np.maximum(lam, floor)) @ vec.T
    d = np.sqrt(np.diag(A))
    out = A / np.outer(d, d)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return np.clip(out, -1.0, 1.0)


def with_params(spec: WorkingCorrelation, alpha=None, between=None, params=None):
    """Return a copy of ``spec`` carrying updated parameter values."""
    if isinstance(spec, Kronecker):
        within = spec.within
        if alpha is not None and not isinstance(within, Independence):
            within = replace(within, alpha=float(alpha))
        kw = {"within": within}
        if between is not None:
            kw["between"] = np.asarray(between, dtype=float)
        return replace(spec, **kw)
    if isinstance(spec, (Exchangeable, AR1)) and alpha is not None:
        return replace(spec, alpha=float(alpha))
    if isinstance(spec, Unstructured) and params is not None:
        return Unstructured(tuple(float(v) for v in params))
    return spec
