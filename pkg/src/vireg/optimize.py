"""Stochastic gradient ascent driver.

ADADELTA step sizes, uniform likelihood subsampling, a linear global
annealing schedule, a median-based stopping rule, and finalization of the
variational parameters as the mean over the last window of iterates.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import va as va_mod
from .model import SadrModel
from .rng import substream

logger = logging.getLogger(__name__)

DIVERGENCE_DROP = 1e6


class AdadeltaState:
    """Per-coordinate adaptive step sizes.

    E[g2] <- decay E[g2] + (1-decay) g2
    delta  = sqrt(E[d2] + eps) / sqrt(E[g2] + eps) * g
    E[d2] <- decay E[d2] + (1-decay) delta2
    """

    def __init__(self, dim: int, decay: float = 0.95, epsilon: float = 1e-6):
        self.decay = decay
        self.epsilon = epsilon
        self.sq_grad = np.zeros(dim)
        self.sq_delta = np.zeros(dim)

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.sq_grad = self.decay * self.sq_grad + (1.0 - self.decay) * grad**2
        delta = np.sqrt(
            (self.sq_delta + self.epsilon) / (self.sq_grad + self.epsilon)
        ) * grad
        self.sq_delta = self.decay * self.sq_delta + (1.0 - self.decay) * delta**2
        return delta


@dataclass(frozen=True)
class AnnealSchedule:
    """Likelihood temperature, linearly decreasing from t0 to 1.

    The temperature is piecewise constant on blocks of ``interval``
    iterations and reaches exactly 1 at ``end``; t0 = 1 disables annealing.
    """

    t0: float = 1.0
    interval: int = 100
    end: int = 9000

    def __post_init__(self):
        if self.t0 < 1.0:
            raise ValueError("starting temperature must be >= 1")
        if self.end % self.interval != 0:
            raise ValueError("annealing end must be a multiple of the interval")

    def temperature(self, t: int) -> float:
        if self.t0 == 1.0:
            return 1.0
        n_updates = self.end // self.interval
        steps = min(t // self.interval, n_updates)
        return max(1.0, self.t0 - (self.t0 - 1.0) * steps / n_updates)


class StoppingMonitor:
    """Median-based convergence check on the noisy ELBO trace.

    Stops once the median over the last ``window`` iterations improves on
    the median over the window before it by no more than ``tolerance``;
    never fires before two full windows exist. Reports divergence when the
    window median falls more than DIVERGENCE_DROP below its best value.
    """

    def __init__(self, window: int = 1000, tolerance: float = 1e-4):
        self.window = window
        self.tolerance = tolerance
        self._values: deque[float] = deque(maxlen=2 * window)
        self._count = 0
        self.best_median = -np.inf

    def update(self, value: float) -> str | None:
        self._values.append(float(value))
        self._count += 1
        if self._count < self.window:
            return None
        tail = np.fromiter(self._values, dtype=float)
        recent = float(np.median(tail[-self.window:]))
        if recent > self.best_median:
            self.best_median = recent
        if self.best_median - recent > DIVERGENCE_DROP:
            return "diverged"
        if self._count < 2 * self.window:
            return None
        previous = float(np.median(tail[-2 * self.window: -self.window]))
        if recent - previous <= self.tolerance:
            return "converged"
        return None


def subsample(rng: np.random.Generator, n: int, n_sub: int) -> np.ndarray:
    """Uniform without-replacement row sample; the likelihood and its
    gradient are re-weighted by n / n_sub downstream."""
    if not 1 <= n_sub <= n:
        raise ValueError(f"n_sub must be in [1, {n}], got {n_sub}")
    if n_sub == n:
        return np.arange(n)
    return rng.choice(n, size=n_sub, replace=False)


@dataclass(frozen=True)
class RunOptions:
    """Optimizer configuration; defaults match the library's documented
    behavior (ADADELTA, no subsampling, annealing off)."""

    n_draws: int = 1
    n_factors: int = 5
    seed: int = 1
    max_iter: int = 50_000
    hybrid: bool = False
    subsample: int | None = None
    t0: float = 1.0
    anneal_interval: int = 100
    anneal_end: int = 9000
    window: int = 1000
    tolerance: float = 1e-4
    init_diag: float = 0.1
    warm_start: bool = False


@dataclass
class FitResult:
    va: va_mod.FactorGaussianVA
    elbo_trace: np.ndarray
    n_iter: int
    status: str
    seed: int
    hybrid: bool
    weight_mu: np.ndarray | None = None
    weight_log_sd: np.ndarray | None = None
    fitted_weights: np.ndarray | None = None


def penalized_mle(model: SadrModel, max_iter: int = 200) -> np.ndarray:
    """Posterior mode of beta with all smoothing variances fixed at one;
    optional warm start for the variational mean."""

    def objective(beta):
        ll_terms, score = model.loglik_terms_and_score(beta)
        grad = model.beta_grad_from_score(score)
        value = float(np.sum(ll_terms))
        for info, block in zip(model.layout.blocks, model.flat_blocks()):
            if block.rank == 0:
                continue
            b = beta[info.beta_slice]
            kb = block.penalty @ b
            value -= 0.5 * float(b @ kb)
            grad[info.beta_slice] -= kb
        return -value, -grad

    result = minimize(
        objective,
        np.zeros(model.p_beta),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter},
    )
    return result.x


def initial_va(model: SadrModel, options: RunOptions) -> va_mod.FactorGaussianVA:
    dim = model.p_beta if options.hybrid else model.p_theta
    mu = None
    if options.warm_start:
        mu = np.zeros(dim)
        mu[: model.p_beta] = penalized_mle(model)
    return va_mod.FactorGaussianVA.initial(
        dim, options.n_factors, options.init_diag, mu=mu
    )


def run(model: SadrModel, options: RunOptions,
        va0: va_mod.FactorGaussianVA | None = None) -> FitResult:
    """Fit the model by stochastic gradient ascent on the ELBO.

    Iterates until the stopping monitor fires or ``max_iter`` is reached and
    returns the variational parameters averaged over the last window of
    iterates, together with the full ELBO trace.
    """
    if options.hybrid:
        model.require_gibbs()
    if va0 is None:
        va0 = initial_va(model, options)
    draws_rng = substream(options.seed, "draws")
    gibbs_rng = substream(options.seed, "gibbs")
    sub_rng = substream(options.seed, "subsample")
    n_sub = options.subsample

    def estimate(va, temperature, rows):
        if options.hybrid:
            return va_mod.hybrid_grad_estimate(
                model, va, options.n_draws, draws_rng, gibbs_rng,
                temperature=temperature, rows=rows,
            )
        return va_mod.grad_estimate(
            model, va, options.n_draws, draws_rng,
            temperature=temperature, rows=rows,
        )

    def draw_rows():
        if n_sub is None or n_sub >= model.n_obs:
            return None
        return subsample(sub_rng, model.n_obs, n_sub)

    lam_hat, trace, n_iter, status = drive_ascent(
        estimate, va0, options, draw_rows
    )
    return FitResult(
        va=va0.unpack(lam_hat),
        elbo_trace=trace,
        n_iter=n_iter,
        status=status,
        seed=options.seed,
        hybrid=options.hybrid,
    )


def drive_ascent(estimate, va0, options: RunOptions, draw_rows):
    """Shared ascent loop: ADADELTA updates, annealing, stopping and
    finalization. ``estimate(va, temperature, rows) -> (grad, elbo)``."""
    schedule = AnnealSchedule(options.t0, options.anneal_interval,
                              options.anneal_end)
    monitor = StoppingMonitor(options.window, options.tolerance)
    lam = va0.pack()
    ada = AdadeltaState(lam.shape[0])
    recent: deque[np.ndarray] = deque(maxlen=options.window)
    trace = []
    status = "max_iter"
    n_iter = 0
    for t in range(1, options.max_iter + 1):
        n_iter = t
        va = va0.unpack(lam)  # re-checks the lower-triangular factor pattern
        temperature = schedule.temperature(t)
        grad, elbo = estimate(va, temperature, draw_rows())
        lam = lam + ada.step(grad)
        trace.append(elbo)
        recent.append(lam)
        state = monitor.update(elbo)
        if state == "diverged":
            raise RuntimeError(
                f"ELBO diverged at iteration {t}: window median "
                f"{np.median(trace[-options.window:]):.3e} dropped more than "
                f"{DIVERGENCE_DROP:.0e} below its best {monitor.best_median:.3e}"
            )
        if state == "converged":
            status = "converged"
            break
    lam_hat = np.mean(np.stack(recent), axis=0)
    return lam_hat, np.asarray(trace), n_iter, status
