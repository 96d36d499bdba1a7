import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from crossgee.errors import DomainError
from crossgee.expfam import ETA_CLAMP, Family, get_family

FAMILIES = ["gaussian", "poisson", "binomial", "gamma"]


def interior(kind, rng, size):
    if kind == "gaussian":
        return rng.uniform(-20, 20, size)
    if kind == "binomial":
        return rng.uniform(1e-3, 1 - 1e-3, size)
    return rng.uniform(1e-2, 50, size)


@pytest.mark.parametrize(
    "fam, mu, eta",
    [(("gaussian",), 2.5, 2.5), (("poisson",), 1.0, 0.0), (("binomial",), 0.5, 0.0)],
)
def test_link_examples(fam, mu, eta):
    assert get_family(*fam).link(mu) == pytest.approx(eta, abs=1e-15)


@pytest.mark.parametrize("name, eta, d", [("gaussian", 7.0, 1.0), ("poisson", 0.0, 1.0), ("binomial", 0.0, 0.25)])
def test_mean_derivative_examples(name, eta, d):
    assert get_family(name).mean_derivative(eta) == pytest.approx(d, abs=1e-15)


@pytest.mark.parametrize("name, mu, v", [("gaussian", -3.0, 1.0), ("poisson", 4.0, 4.0), ("gamma", 3.0, 9.0)])
def test_variance_examples(name, mu, v):
    assert get_family(name).variance_function(mu) == pytest.approx(v)


def test_quasi_likelihood_examples():
    assert get_family("gaussian").quasi_likelihood(2.0, 2.0, 1.0) == 0.0
    assert get_family("poisson").quasi_likelihood(1.0, 1.0, 1.0) == pytest.approx(-1.0)
    assert get_family("poisson").quasi_likelihood(0.0, 0.5, 1.0) == pytest.approx(-0.5)


@pytest.mark.parametrize("name, y, mu", [("poisson", 0.0, 0.5), ("binomial", 0.0, 0.3), ("binomial", 1.0, 0.7)])
def test_quasi_likelihood_matches_score_integral(name, y, mu):
    # QL(mu) - QL(mu0) equals the integral of the quasi-score from mu0 to mu
    fam = get_family(name)
    mu0 = 0.5 if name == "binomial" else 1.0
    integral, _ = quad(lambda t: (y - t) / fam.variance_function(t), mu0, mu)
    diff = fam.quasi_likelihood(y, mu, 1.0) - fam.quasi_likelihood(y, mu0, 1.0)
    assert diff == pytest.approx(integral, abs=1e-10)


@pytest.mark.parametrize("name", FAMILIES)
def test_quasi_score_finite_difference(name):
    fam = get_family(name)
    rng = np.random.default_rng(1)
    mu = interior(name, rng, 200)
    if name == "binomial":
        mu = np.clip(mu, 0.05, 0.95)
        y = rng.integers(0, 2, mu.size).astype(float)
    elif name == "gaussian":
        y = mu + rng.standard_normal(mu.size)
    else:
        mu = np.maximum(mu, 0.5)
        y = rng.poisson(mu).astype(float) if name == "poisson" else rng.gamma(2.0, mu / 2.0)
    phi = 1.7
    h = 1e-5
    fd = (fam.quasi_likelihood(y, mu + h, phi) - fam.quasi_likelihood(y, mu - h, phi)) / (2 * h)
    score = (y - mu) / (phi * fam.variance_function(mu))
    np.testing.assert_allclose(fd, score, rtol=0, atol=1e-6)


@pytest.mark.parametrize("name", FAMILIES)
def test_link_round_trip(name):
    fam = get_family(name)
    mu = interior(name, np.random.default_rng(2), 1000)
    back = fam.inverse_link(fam.link(mu))
    np.testing.assert_allclose(back, mu, rtol=1e-12, atol=0)


@pytest.mark.parametrize("link", ["identity", "log", "logit", "inverse"])
def test_mean_derivative_finite_difference(link):
    name = {"identity": "gaussian", "log": "poisson", "logit": "binomial", "inverse": "gamma"}[link]
    fam = get_family(name, link)
    eta = np.linspace(0.2, 3.0, 50) if link == "inverse" else np.linspace(-3, 3, 50)
    h = 1e-6
    fd = (fam.inverse_link(eta + h) - fam.inverse_link(eta - h)) / (2 * h)
    np.testing.assert_allclose(fam.mean_derivative(eta), fd, rtol=0, atol=1e-6)


@given(st.floats(-1e3, 1e3))
@settings(max_examples=200, deadline=None)
def test_inverse_link_never_overflows(eta):
    for name in ("poisson", "binomial"):
        fam = get_family(name)
        assert np.isfinite(fam.inverse_link(eta))
        assert fam.mean_derivative(eta) > 0


def test_clamp_bounds_linear_predictor():
    fam = get_family("poisson")
    assert fam.inverse_link(1e4) == pytest.approx(np.exp(ETA_CLAMP))


@pytest.mark.parametrize("name", FAMILIES)
def test_variance_positive_on_interior(name):
    fam = get_family(name)
    assert np.all(fam.variance_function(interior(name, np.random.default_rng(3), 500)) > 0)


@pytest.mark.parametrize(
    "name, bad", [("poisson", -1.0), ("binomial", 1.5), ("binomial", 0.0), ("gamma", 0.0)]
)
def test_domain_errors_name_the_value(name, bad):
    fam = get_family(name)
    with pytest.raises(DomainError, match=str(bad).rstrip("0").rstrip(".") or "0"):
        fam.link(bad)
    with pytest.raises(DomainError):
        fam.variance_function(bad)


def test_unknown_family_and_link():
    with pytest.raises(DomainError):
        get_family("tweedie")
    with pytest.raises(DomainError):
        get_family("gaussian", "probit")


def test_canonical_defaults():
    assert Family("poisson").link_name == "log"
    assert Family("binomial").link_name == "logit"
    assert Family("gamma").link_name == "inverse"
