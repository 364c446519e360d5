"""Factor-covariance Gaussian variational approximation and gradient
estimators.

The variational family is N(mu, B B' + D^2) with a p x k factor matrix B
(zeros strictly above the diagonal) and diagonal D = diag(d). Draws are
generated by the deterministic transform mu + B xi + d o eps from standard
normal noise, so the ELBO gradient can be estimated by the
re-parameterization trick: each draw contributes
(dt/dlambda)' [grad_theta log g - grad_theta log q].

Two estimators are provided: the fixed-form one over theta = (beta, log
tau2), and the hybrid one over beta alone, which replaces the variational
factor for the smoothing variances by their exact inverse-gamma conditional
posterior (drawn by a Gibbs step inside each iteration).
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .families import LOG_2PI
from .model import SadrModel

logger = logging.getLogger(__name__)


class FactorGaussianVA:
    """Variational parameters lambda = (mu, vech(B), d)."""

    def __init__(self, mu: np.ndarray, factor: np.ndarray, diag: np.ndarray):
        mu = np.asarray(mu, dtype=float)
        factor = np.asarray(factor, dtype=float)
        diag = np.asarray(diag, dtype=float)
        p = mu.shape[0]
        if factor.ndim != 2 or factor.shape[0] != p or diag.shape[0] != p:
            raise ValueError("inconsistent variational parameter shapes")
        if factor.shape[1] and np.any(np.triu(factor, k=1) != 0.0):
            raise ValueError("factor matrix must have zeros above the diagonal")
        self.mu = mu
        self.factor = factor
        self.diag = diag

    @classmethod
    def initial(cls, dim: int, n_factors: int, diag_scale: float = 0.1,
                mu: np.ndarray | None = None) -> "FactorGaussianVA":
        n_factors = min(n_factors, dim)
        return cls(
            mu=np.zeros(dim) if mu is None else np.asarray(mu, dtype=float),
            factor=np.zeros((dim, n_factors)),
            diag=np.full(dim, diag_scale),
        )

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def n_factors(self) -> int:
        return self.factor.shape[1]

    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T + np.diag(self.diag**2)

    def pattern(self) -> tuple[np.ndarray, np.ndarray]:
        """Row/column indices of the non-zero (lower-triangular) factor
        entries, in row-major order."""
        rows, cols = np.nonzero(np.tril(np.ones((self.dim, self.n_factors))))
        return rows, cols

    def pack(self) -> np.ndarray:
        rows, cols = self.pattern()
        return np.concatenate([self.mu, self.factor[rows, cols], self.diag])

    def unpack(self, lam: np.ndarray) -> "FactorGaussianVA":
        """New VA with the same pattern, parameters read from lam."""
        p, k = self.dim, self.n_factors
        rows, cols = self.pattern()
        nnz = rows.shape[0]
        if lam.shape[0] != 2 * p + nnz:
            raise ValueError("lambda vector has wrong length")
        factor = np.zeros((p, k))
        factor[rows, cols] = lam[p: p + nnz]
        return FactorGaussianVA(lam[:p].copy(), factor, lam[p + nnz:].copy())

    def n_lambda(self) -> int:
        rows, _ = self.pattern()
        return 2 * self.dim + rows.shape[0]


def reparam_sample(va: FactorGaussianVA, xi: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """t(zeta, lambda) = mu + B xi + d o eps."""
    return va.mu + va.factor @ xi + va.diag * eps


def _woodbury(va: FactorGaussianVA, dev: np.ndarray):
    """Sigma^{-1} dev and log|Sigma| using the low-rank identities."""
    if np.any(va.diag == 0.0):
        raise ValueError("degenerate diagonal: some d_i is exactly zero")
    # floor d^2 so 1/d^2 cannot swamp the +I in the k x k inner matrix when
    # a coordinate's variance migrates entirely into the factor part; the
    # induced covariance perturbation is at most 1e-12
    d2 = np.maximum(va.diag**2, 1e-12)
    u = dev / d2
    if va.n_factors == 0:
        return u, float(np.sum(np.log(d2)))
    bt_u = va.factor.T @ u
    m = np.eye(va.n_factors) + va.factor.T @ (va.factor / d2[:, None])
    chol = cho_factor(m, lower=True)
    solve = cho_solve(chol, bt_u)
    sigma_inv_dev = u - (va.factor @ solve) / d2
    logdet = 2.0 * float(np.sum(np.log(np.abs(np.diag(chol[0]))))) \
        + float(np.sum(np.log(d2)))
    return sigma_inv_dev, logdet


def log_q(va: FactorGaussianVA, theta: np.ndarray) -> float:
    """Gaussian log density of the VA, O(p k^2) via the Woodbury identity."""
    dev = np.asarray(theta, dtype=float) - va.mu
    sigma_inv_dev, logdet = _woodbury(va, dev)
    return -0.5 * (va.dim * LOG_2PI + logdet + float(dev @ sigma_inv_dev))


def grad_log_q(va: FactorGaussianVA, theta: np.ndarray) -> np.ndarray:
    """d log q / d theta = -Sigma^{-1} (theta - mu)."""
    dev = np.asarray(theta, dtype=float) - va.mu
    sigma_inv_dev, _ = _woodbury(va, dev)
    return -sigma_inv_dev


def lambda_grad(va: FactorGaussianVA, g: np.ndarray, xi: np.ndarray,
                eps: np.ndarray) -> np.ndarray:
    """(dt/dlambda)' g for one draw: identity for mu, g xi' restricted to
    the lower-triangular pattern for B, and g o eps for d."""
    rows, cols = va.pattern()
    return np.concatenate([g, g[rows] * xi[cols], g * eps])


def _logq_and_solve(va, theta):
    dev = theta - va.mu
    sigma_inv_dev, logdet = _woodbury(va, dev)
    lq = -0.5 * (va.dim * LOG_2PI + logdet + float(dev @ sigma_inv_dev))
    return lq, sigma_inv_dev


def _likelihood_scale(model, temperature, rows):
    weight = 1.0 if rows is None else model.n_obs / len(rows)
    return weight / temperature


def grad_estimate(
    model: SadrModel,
    va: FactorGaussianVA,
    n_draws: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    rows: np.ndarray | None = None,
):
    """Unbiased re-parameterization gradient of the (annealed, possibly
    subsampled) ELBO for the fixed-form VA over theta = (beta, log tau2).

    Returns the lambda-gradient averaged over ``n_draws`` draws and the
    matching ELBO estimate. A draw with non-finite contributions is
    rejected and redrawn once; a second failure raises.
    """
    scale = _likelihood_scale(model, temperature, rows)
    grad_sum = np.zeros(va.n_lambda())
    value_sum = 0.0
    for _ in range(n_draws):
        for attempt in range(2):
            xi = rng.standard_normal(va.n_factors)
            eps = rng.standard_normal(va.dim)
            theta = reparam_sample(va, xi, eps)
            beta, tau_tilde = model.layout.split(theta)
            ll_terms, score = model.loglik_terms_and_score(beta, rows)
            g = np.zeros(va.dim)
            g[: model.p_beta] = scale * model.beta_grad_from_score(score, rows)
            model.add_prior_grad(g, beta, tau_tilde)
            lq, sigma_inv_dev = _logq_and_solve(va, theta)
            g += sigma_inv_dev
            value = scale * float(np.sum(ll_terms)) \
                + model.log_prior(beta, tau_tilde) - lq
            lam_grad = lambda_grad(va, g, xi, eps)
            if np.isfinite(value) and np.all(np.isfinite(lam_grad)):
                grad_sum += lam_grad
                value_sum += value
                break
            if attempt == 0:
                logger.warning("non-finite gradient draw rejected; resampling")
            else:
                raise RuntimeError(
                    "non-finite gradient after resampling; the optimization "
                    "state is likely diverging"
                )
    return grad_sum / n_draws, value_sum / n_draws


def gibbs_tau(model: SadrModel, beta_draws: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    """Exact draws from the inverse-gamma full conditionals of the smoothing
    variances: tau2 ~ IG(a + rank/2, b + beta'K beta / 2), one per beta draw."""
    model.require_gibbs()
    beta_draws = np.atleast_2d(np.asarray(beta_draws, dtype=float))
    n_draws = beta_draws.shape[0]
    shapes = model.gibbs_shapes()
    scales = np.empty((n_draws, model.p_tau))
    for info, block in zip(model.layout.blocks, model.flat_blocks()):
        if info.tau_index is None:
            continue
        b = beta_draws[:, info.beta_slice]
        quad = np.einsum("mi,ij,mj->m", b, block.penalty, b)
        scales[:, info.tau_index] = block.hyperprior.b + 0.5 * quad
    gamma = rng.gamma(shape=np.broadcast_to(shapes, scales.shape), scale=1.0)
    return scales / gamma


def hybrid_grad_estimate(
    model: SadrModel,
    va: FactorGaussianVA,
    n_draws: int,
    rng: np.random.Generator,
    gibbs_rng: np.random.Generator,
    temperature: float = 1.0,
    rows: np.ndarray | None = None,
):
    """Re-parameterization gradient for the hybrid VA: a factor Gaussian for
    beta times the exact conditional posterior for the smoothing variances.

    Per draw, beta is sampled from the Gaussian block, tau2 from its
    inverse-gamma conditional, and the gradient flows through beta only; the
    drawn tau2 enters the ELBO value while its gradient terms cancel
    analytically against the conditional's.
    """
    model.require_gibbs()
    if va.dim != model.p_beta:
        raise ValueError("hybrid VA must cover the beta block only")
    scale = _likelihood_scale(model, temperature, rows)
    grad_sum = np.zeros(va.n_lambda())
    value_sum = 0.0
    for _ in range(n_draws):
        for attempt in range(2):
            xi = rng.standard_normal(va.n_factors)
            eps = rng.standard_normal(va.dim)
            beta = reparam_sample(va, xi, eps)
            tau2 = gibbs_tau(model, beta[None, :], gibbs_rng)[0]
            ll_terms, score = model.loglik_terms_and_score(beta, rows)
            g = scale * model.beta_grad_from_score(score, rows)
            g += model.hybrid_prior_grad(beta)
            lq, sigma_inv_dev = _logq_and_solve(va, beta)
            g += sigma_inv_dev
            value = scale * float(np.sum(ll_terms)) \
                + model.hybrid_prior_value(beta, tau2) - lq
            lam_grad = lambda_grad(va, g, xi, eps)
            if np.isfinite(value) and np.all(np.isfinite(lam_grad)):
                grad_sum += lam_grad
                value_sum += value
                break
            if attempt == 0:
                logger.warning("non-finite gradient draw rejected; resampling")
            else:
                raise RuntimeError(
                    "non-finite gradient after resampling; the optimization "
                    "state is likely diverging"
                )
    return grad_sum / n_draws, value_sum / n_draws


def elbo_values(
    model: SadrModel,
    va: FactorGaussianVA,
    n_draws: int,
    rng: np.random.Generator,
    hybrid: bool = False,
    gibbs_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-draw ELBO contributions at fixed lambda (no gradients), for
    converged-bound estimation with a Monte Carlo standard error."""
    values = np.empty(n_draws)
    for m in range(n_draws):
        xi = rng.standard_normal(va.n_factors)
        eps = rng.standard_normal(va.dim)
        theta = reparam_sample(va, xi, eps)
        if hybrid:
            beta = theta
            tau2 = gibbs_tau(model, beta[None, :], gibbs_rng or rng)[0]
            values[m] = float(np.sum(model.loglik_terms(beta))) \
                + model.hybrid_prior_value(beta, tau2) - log_q(va, beta)
        else:
            beta, tau_tilde = model.layout.split(theta)
            values[m] = float(np.sum(model.loglik_terms(beta))) \
                + model.log_prior(beta, tau_tilde) - log_q(va, theta)
    return values


def posterior_sample(va: FactorGaussianVA, n_draws: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Independent draws from the fitted Gaussian VA, shape (n_draws, p)."""
    xi = rng.standard_normal((n_draws, va.n_factors))
    eps = rng.standard_normal((n_draws, va.dim))
    return va.mu + xi @ va.factor.T + eps * va.diag
