"""Response distribution families.

Each family maps the K predictor columns ``eta`` to its distributional
parameters through fixed link functions and provides the log-density, its
analytic gradient with respect to ``eta``, the CDF, quantile function, a
sampler and the predictive mean. All evaluators are vectorized over
observations; ``eta`` has shape (n, K).
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

LOG_2PI = float(np.log(2.0 * np.pi))


class Family:
    """Base class; subclasses define the distribution-specific pieces."""

    name: str = ""
    n_params: int = 0
    param_names: tuple[str, ...] = ()
    links: tuple[str, ...] = ()
    discrete: bool = False

    def log_density(self, y, eta) -> np.ndarray:
        raise NotImplementedError

    def score_eta(self, y, eta) -> np.ndarray:
        """d log p / d eta, shape (n, K)."""
        raise NotImplementedError

    def cdf(self, y, eta) -> np.ndarray:
        raise NotImplementedError

    def quantile(self, p, eta) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        return self._quantile(p, eta)

    def _quantile(self, p, eta) -> np.ndarray:
        raise NotImplementedError

    def sample(self, eta, rng: np.random.Generator, size=None) -> np.ndarray:
        """One draw per row, or an array of ``size`` draws broadcast over
        rows when ``size`` is given (its last axis must equal n)."""
        raise NotImplementedError

    def mean(self, eta) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def _check(y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        if np.any(np.isnan(y)) or np.any(np.isnan(eta)):
            raise ValueError("NaN in response or predictor")
        return y, eta


def link_apply(link: str, value):
    value = np.asarray(value, dtype=float)
    if link == "identity":
        return value
    if link == "log":
        return np.log(value)
    if link == "logit":
        return np.log(value) - np.log1p(-value)
    raise ValueError(f"unknown link '{link}'")


def link_invert(link: str, eta):
    eta = np.asarray(eta, dtype=float)
    if link == "identity":
        return eta
    if link == "log":
        return np.exp(eta)
    if link == "logit":
        return 1.0 / (1.0 + np.exp(-eta))
    raise ValueError(f"unknown link '{link}'")


class Gaussian(Family):
    """Normal response with identity-linked location and log-linked scale."""

    name = "gaussian"
    n_params = 2
    param_names = ("mu", "sigma")
    links = ("identity", "log")

    def log_density(self, y, eta):
        y, eta = self._check(y, eta)
        mu, log_sigma = eta[:, 0], eta[:, 1]
        z = (y - mu) * np.exp(-log_sigma)
        return -0.5 * LOG_2PI - log_sigma - 0.5 * z * z

    def score_eta(self, y, eta):
        y, eta = self._check(y, eta)
        mu, log_sigma = eta[:, 0], eta[:, 1]
        inv_var = np.exp(-2.0 * log_sigma)
        resid = y - mu
        d_mu = resid * inv_var
        d_sigma = resid * resid * inv_var - 1.0
        return np.column_stack([d_mu, d_sigma])

    def cdf(self, y, eta):
        y, eta = self._check(y, eta)
        return stats.norm.cdf(y, loc=eta[:, 0], scale=np.exp(eta[:, 1]))

    def _quantile(self, p, eta):
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        return stats.norm.ppf(p, loc=eta[:, 0], scale=np.exp(eta[:, 1]))

    def sample(self, eta, rng, size=None):
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        return rng.normal(eta[:, 0], np.exp(eta[:, 1]), size=size)

    def mean(self, eta):
        return np.atleast_2d(np.asarray(eta, dtype=float))[:, 0]


class Gamma(Family):
    """Gamma response parameterized by mean mu and shape sigma (both
    log-linked), so that Var(y) = mu^2 / sigma."""

    name = "gamma"
    n_params = 2
    param_names = ("mu", "sigma")
    links = ("log", "log")

    def log_density(self, y, eta):
        y, eta = self._check(y, eta)
        log_mu, log_shape = eta[:, 0], eta[:, 1]
        shape = np.exp(log_shape)
        # rate = shape / mu
        log_rate = log_shape - log_mu
        return (
            shape * log_rate
            + (shape - 1.0) * np.log(y)
            - np.exp(log_rate) * y
            - special.gammaln(shape)
        )

    def score_eta(self, y, eta):
        y, eta = self._check(y, eta)
        mu = np.exp(eta[:, 0])
        shape = np.exp(eta[:, 1])
        d_mu = shape * (y - mu) / mu
        d_shape = shape * (
            np.log(shape) - eta[:, 0] + 1.0 + np.log(y) - y / mu
            - special.digamma(shape)
        )
        return np.column_stack([d_mu, d_shape])

    def _dist(self, eta):
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        mu, shape = np.exp(eta[:, 0]), np.exp(eta[:, 1])
        return stats.gamma(a=shape, scale=mu / shape)

    def cdf(self, y, eta):
        y, _ = self._check(y, eta)
        return self._dist(eta).cdf(y)

    def _quantile(self, p, eta):
        return self._dist(eta).ppf(p)

    def sample(self, eta, rng, size=None):
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        mu, shape = np.exp(eta[:, 0]), np.exp(eta[:, 1])
        return rng.gamma(shape=shape, scale=mu / shape, size=size)

    def mean(self, eta):
        return np.exp(np.atleast_2d(np.asarray(eta, dtype=float))[:, 0])


class NegativeBinomial(Family):
    """Negative binomial counts with log-linked mean mu and log-linked
    dispersion delta, Var(y) = mu + mu^2 / delta."""

    name = "negbin"
    n_params = 2
    param_names = ("mu", "delta")
    links = ("log", "log")
    discrete = True

    def log_density(self, y, eta):
        y, eta = self._check(y, eta)
        mu = np.exp(eta[:, 0])
        delta = np.exp(eta[:, 1])
        return (
            special.gammaln(y + delta)
            - special.gammaln(delta)
            - special.gammaln(y + 1.0)
            + delta * eta[:, 1]
            + y * eta[:, 0]
            - (y + delta) * np.log(delta + mu)
        )

    def score_eta(self, y, eta):
        y, eta = self._check(y, eta)
        mu = np.exp(eta[:, 0])
        delta = np.exp(eta[:, 1])
        d_mu = y - mu * (y + delta) / (delta + mu)
        d_delta = delta * (
            special.digamma(y + delta)
            - special.digamma(delta)
            + eta[:, 1]
            - np.log(delta + mu)
            + (mu - y) / (delta + mu)
        )
        return np.column_stack([d_mu, d_delta])

    def _size_prob(self, eta):
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        mu, delta = np.exp(eta[:, 0]), np.exp(eta[:, 1])
        return delta, delta / (delta + mu)

    def cdf(self, y, eta):
        y, _ = self._check(y, eta)
        size, prob = self._size_prob(eta)
        return stats.nbinom.cdf(y, size, prob)

    def _quantile(self, p, eta):
        size, prob = self._size_prob(eta)
        return stats.nbinom.ppf(p, size, prob)

    def sample(self, eta, rng, size=None):
        n_param, prob = self._size_prob(eta)
        return rng.negative_binomial(n_param, prob, size=size).astype(float)

    def mean(self, eta):
        return np.exp(np.atleast_2d(np.asarray(eta, dtype=float))[:, 0])


_FAMILIES = {
    "gaussian": Gaussian,
    "gamma": Gamma,
    "negbin": NegativeBinomial,
    "negative_binomial": NegativeBinomial,
}


def get_family(name: str) -> Family:
    try:
        return _FAMILIES[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown family '{name}'") from None
