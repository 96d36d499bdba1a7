"""Exponential-family link and variance functions.

A :class:`Family` bundles a variance function with a link.  All methods are
vectorised over numpy arrays and raise :class:`~crossgee.errors.DomainError`
when handed a value outside the mean domain of the family.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _expit
from scipy.special import xlogy as _xlogy

from .errors import DomainError

# |eta| bound applied before exponentiating in the log and logit links
ETA_CLAMP = 30.0

FAMILIES = ("gaussian", "poisson", "binomial", "gamma")
LINKS = ("identity", "log", "logit", "inverse")

CANONICAL_LINK = {
    "gaussian": "identity",
    "poisson": "log",
    "binomial": "logit",
    "gamma": "inverse",
}


def _first_bad(values, ok):
    bad = np.asarray(values)[~ok]
    return bad.flat[0] if bad.size else None


@dataclass(frozen=True)
class Family:
    """Mean/variance model of a GLM-type response.

    Parameters
    ----------
    kind : {"gaussian", "poisson", "binomial", "gamma"}
    link : {"identity", "log", "logit", "inverse"}, optional
        Defaults to the canonical link of ``kind``.
    """

    kind: str = "gaussian"
    link_name: str = ""

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in FAMILIES:
            raise DomainError(f"unknown family {self.kind!r}; expected one of {FAMILIES}")
        link = (self.link_name or CANONICAL_LINK[kind]).lower()
        if link not in LINKS:
            raise DomainError(f"unknown link {self.link_name!r}; expected one of {LINKS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "link_name", link)

    def __str__(self):
        return f"{self.kind}/{self.link_name}"

    # -- domain checks -------------------------------------------------

    def check_mean(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            ok = np.isfinite(mu)
        elif self.kind in ("poisson", "gamma"):
            ok = np.isfinite(mu) & (mu > 0)
        else:
            ok = (mu > 0) & (mu < 1)
        if not np.all(ok):
            raise DomainError(f"mean {_first_bad(mu, ok)!r} outside the {self.kind} mean domain")
        return mu

    def check_response(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "gaussian":
            ok = np.isfinite(y)
        elif self.kind == "poisson":
            ok = np.isfinite(y) & (y >= 0)
        elif self.kind == "gamma":
            ok = np.isfinite(y) & (y > 0)
        else:
            ok = (y == 0) | (y == 1)
        if not np.all(ok):
            raise DomainError(f"response {_first_bad(y, ok)!r} invalid for the {self.kind} family")
        return y

    # -- link ----------------------------------------------------------

    def link(self, mu):
        """Linear predictor ``eta = g(mu)``."""
        mu = np.asarray(mu, dtype=float)
        name = self.link_name
        if name == "identity":
            return mu.copy() if mu.ndim else mu
        if name == "log":
            ok = mu > 0
            if not np.all(ok):
                raise DomainError(f"log link undefined at mu={_first_bad(mu, ok)!r}")
            return np.log(mu)
        if name == "logit":
            ok = (mu > 0) & (mu < 1)
            if not np.all(ok):
                raise DomainError(f"logit link undefined at mu={_first_bad(mu, ok)!r}")
            return np.log(mu) - np.log1p(-mu)
        ok = mu != 0
        if not np.all(ok):
            raise DomainError("inverse link undefined at mu=0")
        return 1.0 / mu

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        name = self.link_name
        if name == "identity":
            return eta.copy() if eta.ndim else eta
        if name == "log":
            return np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
        if name == "logit":
            return _expit(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
        ok = eta != 0
        if not np.all(ok):
            raise DomainError("inverse link undefined at eta=0")
        return 1.0 / eta

    def mean_derivative(self, eta):
        """``d mu / d eta`` evaluated at ``eta``."""
        eta = np.asarray(eta, dtype=float)
        name = self.link_name
        if name == "identity":
            return np.ones_like(eta)
        if name == "log":
            return np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
        if name == "logit":
            p = _expit(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
            return p * (1.0 - p)
        ok = eta != 0
        if not np.all(ok):
            raise DomainError("inverse link undefined at eta=0")
        return -1.0 / eta**2

    # -- variance ------------------------------------------------------

    def variance_function(self, mu):
        mu = self.check_mean(mu)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "poisson":
            return mu.copy() if mu.ndim else mu
        if self.kind == "binomial":
            return mu * (1.0 - mu)
        return mu**2

    def quasi_likelihood(self, y, mu, phi=1.0):
        """Per-observation independence quasi-likelihood.

        ``y * log(mu)`` is taken as 0 when ``y == 0``.
        """
        if not phi > 0:
            raise DomainError(f"dispersion must be positive, got {phi!r}")
        y = np.asarray(y, dtype=float)
        mu = self.check_mean(mu)
        if self.kind == "gaussian":
            return -((y - mu) ** 2) / (2.0 * phi)
        if self.kind == "poisson":
            return (_xlogy(y, mu) - mu) / phi
        if self.kind == "binomial":
            return (_xlogy(y, mu) - _xlogy(y, 1.0 - mu) + np.log1p(-mu)) / phi
        return (-y / mu - np.log(mu)) / phi

    def initial_mean(self, y):
        """Starting values for the mean, kept inside the domain."""
        y = np.asarray(y, dtype=float)
        if self.kind == "gaussian":
            return y.copy()
        if self.kind == "binomial":
            return (y + 0.5) / 2.0
        return (y + y.mean()) / 2.0 + 1e-3


def get_family(name: str = "gaussian", link: str | None = None) -> Family:
    """Resolve CLI-style identifiers to a :class:`Family`."""
    return Family(name, link or "")
