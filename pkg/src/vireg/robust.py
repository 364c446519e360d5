"""Robust fitting through Bayesian data re-weighting.

Each observation gets a likelihood exponent w_i in (0, 1) with a beta prior;
outliers are down-weighted automatically. The weights are logit-transformed
to the real line and approximated by a diagonal Gaussian block that is
independent of the theta block, so the joint transform stacks the factor
draw for theta with mu_w + exp(rho) o eps for the weights and the factor
matrix has structurally zero rows for the weight block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import va as va_mod
from .families import LOG_2PI
from .model import SadrModel
from .optimize import FitResult, RunOptions, drive_ascent, initial_va, subsample
from .rng import substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BetaHyper:
    """Shared beta prior on the observation weights."""

    a_w: float = 0.2
    b_w: float = 0.01

    def __post_init__(self):
        if self.a_w <= 0.0 or self.b_w <= 0.0:
            raise ValueError("beta prior parameters must be positive")


@dataclass(frozen=True)
class RobustOptions:
    prior: BetaHyper = BetaHyper()
    init_weight: float = 0.98
    init_scale: str = "weight"  # "weight": mu_w = logit(0.98); "logit": mu_w = 0.98
    init_log_sd: float = 1.0
    freeze_weights: bool = False


def weight_transform(w_tilde: np.ndarray) -> np.ndarray:
    """Logit-scale weights to (0, 1)."""
    return special.expit(w_tilde)


def weight_inverse(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0.0) or np.any(w >= 1.0):
        raise ValueError("weights must lie strictly inside (0, 1)")
    return np.log(w) - np.log1p(-w)


def _log_weight_prior(w_tilde: np.ndarray, prior: BetaHyper) -> np.ndarray:
    """Beta log prior plus the logit Jacobian, per observation; collapses to
    a_w log w + b_w log(1 - w) - log B(a_w, b_w) which is evaluated through
    softplus for stability at extreme w_tilde."""
    log_w = -np.logaddexp(0.0, -w_tilde)
    log_1mw = -np.logaddexp(0.0, w_tilde)
    return prior.a_w * log_w + prior.b_w * log_1mw \
        - special.betaln(prior.a_w, prior.b_w)


def _weight_prior_grad(w: np.ndarray, prior: BetaHyper) -> np.ndarray:
    """d/dw_tilde of the beta log prior plus Jacobian."""
    return prior.a_w * (1.0 - w) - prior.b_w * w


def augmented_log_joint(model: SadrModel, theta: np.ndarray,
                        w_tilde: np.ndarray, prior: BetaHyper) -> float:
    """Log of the weight-augmented posterior kernel: the likelihood terms
    enter with exponents w_i, the parameter priors are unweighted, and the
    beta prior on w plus the logit Jacobian is added."""
    beta, tau_tilde = model.layout.split(theta)
    w = weight_transform(w_tilde)
    ll_terms = model.loglik_terms(beta)
    return float(np.sum(w * ll_terms)) + model.log_prior(beta, tau_tilde) \
        + float(np.sum(_log_weight_prior(np.asarray(w_tilde, dtype=float), prior)))


def grad_w_tilde_log_joint(model: SadrModel, theta: np.ndarray,
                           w_tilde: np.ndarray, prior: BetaHyper) -> np.ndarray:
    """Gradient of the augmented log joint in the logit weights."""
    beta, _ = model.layout.split(theta)
    w = weight_transform(np.asarray(w_tilde, dtype=float))
    ll_terms = model.loglik_terms(beta)
    return w * (1.0 - w) * ll_terms + _weight_prior_grad(w, prior)


class RobustState:
    """Joint variational state: factor Gaussian for theta, diagonal Gaussian
    for the logit weights. Packs as (lambda_theta, mu_w, rho)."""

    def __init__(self, theta_va: va_mod.FactorGaussianVA,
                 weight_mu: np.ndarray, weight_rho: np.ndarray):
        self.theta_va = theta_va
        self.weight_mu = np.asarray(weight_mu, dtype=float)
        self.weight_rho = np.asarray(weight_rho, dtype=float)

    @property
    def n_obs(self) -> int:
        return self.weight_mu.shape[0]

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.theta_va.pack(), self.weight_mu, self.weight_rho]
        )

    def unpack(self, lam: np.ndarray) -> "RobustState":
        n_theta = self.theta_va.n_lambda()
        n = self.n_obs
        if lam.shape[0] != n_theta + 2 * n:
            raise ValueError("lambda vector has wrong length")
        return RobustState(
            self.theta_va.unpack(lam[:n_theta]),
            lam[n_theta: n_theta + n].copy(),
            lam[n_theta + n:].copy(),
        )

    def total_factor(self) -> np.ndarray:
        """Factor matrix of the stacked (theta, w_tilde) draw; the weight
        rows are structurally zero."""
        k = self.theta_va.n_factors
        return np.vstack([self.theta_va.factor, np.zeros((self.n_obs, k))])

    def total_covariance(self) -> np.ndarray:
        top = self.theta_va.covariance()
        p, n = self.theta_va.dim, self.n_obs
        cov = np.zeros((p + n, p + n))
        cov[:p, :p] = top
        cov[p:, p:] = np.diag(np.exp(2.0 * self.weight_rho))
        return cov


def weight_log_q(weight_mu, weight_rho, w_tilde) -> float:
    dev = (w_tilde - weight_mu) * np.exp(-weight_rho)
    return float(
        np.sum(-0.5 * LOG_2PI - weight_rho - 0.5 * dev**2)
    )


def robust_grad_estimate(
    model: SadrModel,
    state: RobustState,
    prior: BetaHyper,
    n_draws: int,
    rng: np.random.Generator,
    gibbs_rng: np.random.Generator | None = None,
    hybrid: bool = False,
    temperature: float = 1.0,
    rows: np.ndarray | None = None,
):
    """Re-parameterization gradient of the augmented ELBO for both lambda
    blocks; the weight-block entropy uses the diagonal Gaussian density."""
    if hybrid:
        model.require_gibbs()
    n = model.n_obs
    p = state.theta_va.dim
    scale = (1.0 if rows is None else n / len(rows)) / temperature
    grad_sum = np.zeros(state.pack().shape[0])
    value_sum = 0.0
    for _ in range(n_draws):
        for attempt in range(2):
            xi = rng.standard_normal(state.theta_va.n_factors)
            eps_total = rng.standard_normal(p + n)
            eps, eps_w = eps_total[:p], eps_total[p:]
            theta = va_mod.reparam_sample(state.theta_va, xi, eps)
            sd_w = np.exp(state.weight_rho)
            w_tilde = state.weight_mu + sd_w * eps_w
            w = weight_transform(w_tilde)
            if hybrid:
                beta = theta
                tau2 = va_mod.gibbs_tau(model, beta[None, :], gibbs_rng or rng)[0]
            else:
                beta, tau_tilde = model.layout.split(theta)
            ll_terms, score = model.loglik_terms_and_score(beta, rows)
            w_rows = w if rows is None else w[rows]

            # theta block
            g_theta = np.zeros(p)
            g_theta[: model.p_beta] = scale * model.beta_grad_from_score(
                score, rows, weights=w_rows
            )
            if hybrid:
                g_theta += model.hybrid_prior_grad(beta)
                prior_value = model.hybrid_prior_value(beta, tau2)
            else:
                model.add_prior_grad(g_theta, beta, tau_tilde)
                prior_value = model.log_prior(beta, tau_tilde)
            lq_theta, sigma_inv_dev = va_mod._logq_and_solve(state.theta_va, theta)
            g_theta += sigma_inv_dev

            # weight block: likelihood part on the sampled rows, prior and
            # entropy parts on all observations
            g_w = _weight_prior_grad(w, prior) + eps_w / sd_w
            lik_w = scale * w_rows * (1.0 - w_rows) * ll_terms
            if rows is None:
                g_w += lik_w
            else:
                g_w[rows] += lik_w

            lq_w = float(
                np.sum(-0.5 * LOG_2PI - state.weight_rho - 0.5 * eps_w**2)
            )
            value = (
                scale * float(np.sum(w_rows * ll_terms))
                + prior_value
                + float(np.sum(_log_weight_prior(w_tilde, prior)))
                - lq_theta
                - lq_w
            )
            lam_grad = np.concatenate([
                va_mod.lambda_grad(state.theta_va, g_theta, xi, eps),
                g_w,
                g_w * sd_w * eps_w,
            ])
            if np.isfinite(value) and np.all(np.isfinite(lam_grad)):
                grad_sum += lam_grad
                value_sum += value
                break
            if attempt == 0:
                logger.warning("non-finite robust gradient draw rejected; resampling")
            else:
                raise RuntimeError(
                    "non-finite gradient after resampling; the optimization "
                    "state is likely diverging"
                )
    return grad_sum / n_draws, value_sum / n_draws


def initial_state(model: SadrModel, options: RunOptions,
                  robust: RobustOptions) -> RobustState:
    theta_va = initial_va(model, options)
    if robust.init_scale == "weight":
        mu_w = float(weight_inverse(np.asarray([robust.init_weight]))[0])
    elif robust.init_scale == "logit":
        mu_w = robust.init_weight
    else:
        raise ValueError("init_scale must be 'weight' or 'logit'")
    n = model.n_obs
    return RobustState(
        theta_va,
        np.full(n, mu_w),
        np.full(n, robust.init_log_sd),
    )


def fitted_weights(weight_mu: np.ndarray, weight_log_sd: np.ndarray,
                   rng: np.random.Generator, n_draws: int = 10_000) -> np.ndarray:
    """Posterior mean weights: Monte Carlo average of the inverse-logit of
    the weight block draws. Always strictly inside (0, 1)."""
    sd = np.exp(weight_log_sd)
    total = np.zeros(weight_mu.shape[0])
    chunk = 1000
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        eps = rng.standard_normal((m, weight_mu.shape[0]))
        total += np.sum(weight_transform(weight_mu + sd * eps), axis=0)
        done += m
    return total / n_draws


def run_robust(model: SadrModel, options: RunOptions,
               robust: RobustOptions | None = None,
               state0: RobustState | None = None) -> FitResult:
    """Fit with Bayesian data re-weighting. The hybrid Gibbs path remains
    valid because the weighted likelihood leaves the tau2 conditionals
    untouched (the parameter priors are unweighted)."""
    robust = robust or RobustOptions()
    if options.hybrid:
        model.require_gibbs()
    if state0 is None:
        state0 = initial_state(model, options, robust)
    draws_rng = substream(options.seed, "draws")
    gibbs_rng = substream(options.seed, "gibbs")
    sub_rng = substream(options.seed, "subsample")
    weights_rng = substream(options.seed, "weights")
    n_theta_lambda = state0.theta_va.n_lambda()

    def estimate(state, temperature, rows):
        grad, value = robust_grad_estimate(
            model, state, robust.prior, options.n_draws, draws_rng,
            gibbs_rng=gibbs_rng, hybrid=options.hybrid,
            temperature=temperature, rows=rows,
        )
        if robust.freeze_weights:
            grad[n_theta_lambda:] = 0.0
        return grad, value

    def draw_rows():
        if options.subsample is None or options.subsample >= model.n_obs:
            return None
        return subsample(sub_rng, model.n_obs, options.subsample)

    lam_hat, trace, n_iter, status = drive_ascent(
        estimate, state0, options, draw_rows
    )
    final = state0.unpack(lam_hat)
    return FitResult(
        va=final.theta_va,
        elbo_trace=trace,
        n_iter=n_iter,
        status=status,
        seed=options.seed,
        hybrid=options.hybrid,
        weight_mu=final.weight_mu,
        weight_log_sd=final.weight_rho,
        fitted_weights=fitted_weights(
            final.weight_mu, final.weight_rho, weights_rng
        ),
    )
