"""Per-subject accumulation kernels.

Two implementations of each kernel exist: a numba ``@njit`` loop and a pure
numpy path.  Setting the environment variable ``CROSSGEE_NUMBA=1`` selects the
numba path (when numba imports); the default is numpy, which is faster at the
P*L and subject counts of typical crossover studies because the batched
products go through BLAS (see ``benchmarks/bench_kernels.py``).  Both paths
accumulate subjects in index order, so results do not depend on how many
worker processes a study uses.

Array conventions (``n`` subjects, ``m = P * L`` cells, ``p`` coefficients):

``Et``      (n, m, p)  rows of ``D_i`` scaled by ``V(mu)^-1/2``; zero for missing cells
``e``       (n, m)     residuals scaled by ``V(mu)^-1/2``; zero for missing cells
``rinv``    (k, m, m)  inverse working correlation per missingness pattern,
                       zero-padded on missing cells
``pattern`` (n,)       pattern index of each subject
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("CROSSGEE_NUMBA", "0").strip().lower()
NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG in ("1", "true", "on", "yes")


def gee_sums_numpy(Et, e, rinv, pattern):
    """Return ``(B, U, M)``: information, score and sandwich meat."""
    n, m, p = Et.shape
    B = np.zeros((p, p))
    per = np.zeros((n, p))
    for g in range(rinv.shape[0]):
        idx = np.flatnonzero(pattern == g)
        if idx.size == 0:
            continue
        E = Et[idx]
        G = np.matmul(rinv[g], E)
        B += np.tensordot(E, G, axes=([0, 1], [0, 1]))
        per[idx] = np.einsum("iap,ia->ip", G, e[idx])
    U = per.sum(axis=0)
    M = per.T @ per
    return B, U, M


def psi_moments_numpy(C, R1):
    """``Q[j, j'] = sum_i C[i, j'] @ R1 @ C[i, j]`` for centred residuals ``C`` (n, P, L)."""
    W = np.matmul(C, R1.T)
    return np.tensordot(W, C, axes=([0, 2], [0, 2]))


if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def _gee_sums_nb(Et, e, rinv, pattern):
        n, m, p = Et.shape
        B = np.zeros((p, p))
        U = np.zeros(p)
        M = np.zeros((p, p))
        G = np.empty((m, p))
        u = np.empty(p)
        for i in range(n):
            R = rinv[pattern[i]]
            E = Et[i]
            ei = e[i]
            G[:, :] = 0.0
            for a in range(m):
                for b in range(m):
                    r = R[a, b]
                    if r != 0.0:
                        for c in range(p):
                            G[a, c] += r * E[b, c]
            u[:] = 0.0
            for a in range(m):
                w = ei[a]
                for c in range(p):
                    u[c] += G[a, c] * w
                for c in range(p):
                    x = E[a, c]
                    if x != 0.0:
                        for d in range(p):
                            B[c, d] += x * G[a, d]
            for c in range(p):
                U[c] += u[c]
                for d in range(p):
                    M[c, d] += u[c] * u[d]
        return B, U, M

    @numba.njit(cache=True)
    def _psi_moments_nb(C, R1):
        n, P, L = C.shape
        Q = np.zeros((P, P))
        w = np.empty(L)
        for i in range(n):
            for j in range(P):
                for k in range(L):
                    s = 0.0
                    for l in range(L):
                        s += R1[k, l] * C[i, j, l]
                    w[k] = s
                for jj in range(P):
                    s = 0.0
                    for k in range(L):
                        s += C[i, jj, k] * w[k]
                    Q[j, jj] += s
        return Q

    def gee_sums_numba(Et, e, rinv, pattern):
        return _gee_sums_nb(
            np.ascontiguousarray(Et, dtype=np.float64),
            np.ascontiguousarray(e, dtype=np.float64),
            np.ascontiguousarray(rinv, dtype=np.float64),
            np.ascontiguousarray(pattern, dtype=np.int64),
        )

    def psi_moments_numba(C, R1):
        return _psi_moments_nb(
            np.ascontiguousarray(C, dtype=np.float64), np.ascontiguousarray(R1, dtype=np.float64)
        )

else:  # pragma: no cover
    gee_sums_numba = gee_sums_numpy
    psi_moments_numba = psi_moments_numpy


def gee_sums(Et, e, rinv, pattern, backend: str | None = None):
    if _pick(backend) == "numba":
        return gee_sums_numba(Et, e, rinv, pattern)
    return gee_sums_numpy(Et, e, rinv, pattern)


def psi_moments(C, R1, backend: str | None = None):
    if _pick(backend) == "numba":
        return psi_moments_numba(C, R1)
    return psi_moments_numpy(C, R1)


def _pick(backend):
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and not NUMBA_AVAILABLE:
        return "numpy"
    return backend


def active_backend() -> str:
    return _pick(None)
