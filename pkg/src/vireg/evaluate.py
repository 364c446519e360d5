"""Predictive evaluation from posterior samples.

Log score and CRPS are negatively oriented (smaller is better). The log
score is the mean negative log of the equal-weight mixture of per-sample
predictive densities, stabilized through log-sum-exp; the CRPS is estimated
by the energy form mean|X - y| - mean|X - X'|/2 from Monte Carlo predictive
draws; the WAIC decomposes into the log pointwise predictive density and an
effective parameter count based on per-observation posterior variances of
the log density.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .families import Family

logger = logging.getLogger(__name__)


def sample_log_densities(family: Family, eta_draws: np.ndarray,
                         y: np.ndarray) -> np.ndarray:
    """Matrix of log p(y_i | eta^[s]_i), shape (S, n)."""
    eta_draws = np.asarray(eta_draws, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.empty((eta_draws.shape[0], y.shape[0]))
    for s in range(eta_draws.shape[0]):
        out[s] = family.log_density(y, eta_draws[s])
    return out


def log_score(family: Family, eta_draws: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log predictive density over the evaluation rows."""
    log_dens = sample_log_densities(family, eta_draws, y)
    n_samples = log_dens.shape[0]
    log_mix = logsumexp(log_dens, axis=0) - np.log(n_samples)
    if np.any(np.isneginf(log_mix)):
        bad = np.nonzero(np.isneginf(log_mix))[0]
        logger.warning(
            "predictive density is zero for observations %s", bad.tolist()
        )
    return float(-np.mean(log_mix))


def crps(
    family: Family,
    eta_draws: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    draws_per_sample: int = 100,
    max_chunk: int = 2_000_000,
) -> float:
    """Sample CRPS averaged over observations.

    For each observation the predictive ensemble pools ``draws_per_sample``
    draws from every posterior sample; the second energy term pairs the
    ensemble with an independent permutation of itself. Observations are
    processed in chunks to bound memory.
    """
    if family.discrete:
        raise ValueError(
            "CRPS requires a continuous family; use log_score for counts"
        )
    eta_draws = np.asarray(eta_draws, dtype=float)
    y = np.asarray(y, dtype=float)
    n_samples = eta_draws.shape[0]
    n_obs = y.shape[0]
    pool = n_samples * draws_per_sample
    chunk = max(1, max_chunk // pool)
    total = 0.0
    for start in range(0, n_obs, chunk):
        stop = min(start + chunk, n_obs)
        nc = stop - start
        draws = np.empty((pool, nc))
        for s in range(n_samples):
            draws[s * draws_per_sample:(s + 1) * draws_per_sample] = (
                family.sample(
                    eta_draws[s, start:stop], rng, size=(draws_per_sample, nc)
                )
            )
        term1 = np.mean(np.abs(draws - y[start:stop]), axis=0)
        perm = rng.permutation(pool)
        term2 = 0.5 * np.mean(np.abs(draws - draws[perm]), axis=0)
        total += float(np.sum(term1 - term2))
    return total / n_obs


def waic(family: Family, eta_draws: np.ndarray, y: np.ndarray):
    """(waic, l_waic, p_waic): -2 lppd + 2 effective parameters, with the
    variance term using the S-1 divisor."""
    eta_draws = np.asarray(eta_draws, dtype=float)
    if eta_draws.shape[0] < 2:
        raise ValueError("WAIC needs at least 2 posterior samples")
    log_dens = sample_log_densities(family, eta_draws, y)
    n_samples = log_dens.shape[0]
    lppd_terms = logsumexp(log_dens, axis=0) - np.log(n_samples)
    l_waic = float(np.sum(lppd_terms))
    p_waic = float(np.sum(np.var(log_dens, axis=0, ddof=1)))
    return -2.0 * l_waic + 2.0 * p_waic, l_waic, p_waic


def quantile_residuals(family: Family, eta_hat: np.ndarray, y: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Normalized quantile residuals at a fitted point estimate.

    Continuous families: Phi^{-1}(F(y)); discrete families: randomized via a
    uniform draw on [F(y-1), F(y)]. Probabilities of exactly 0 or 1 are
    clamped to residuals of -8 / +8 with a warning.
    """
    y = np.asarray(y, dtype=float)
    if family.discrete:
        hi = family.cdf(y, eta_hat)
        lo = family.cdf(y - 1.0, eta_hat)
        u = lo + rng.uniform(size=y.shape[0]) * (hi - lo)
    else:
        u = family.cdf(y, eta_hat)
    residuals = np.empty(y.shape[0])
    boundary = (u <= 0.0) | (u >= 1.0)
    if np.any(boundary):
        logger.warning(
            "predictive CDF hit 0/1 for %d observations; residuals clamped "
            "to +/-8", int(np.sum(boundary)),
        )
    interior = ~boundary
    residuals[interior] = stats.norm.ppf(u[interior])
    residuals[boundary] = np.where(u[boundary] <= 0.0, -8.0, 8.0)
    return residuals
