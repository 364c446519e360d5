"""Model assembly: predictors, priors and the log-joint density.

The parameter vector is ``theta = (beta, log tau2)``: all basis coefficients
stacked parameter-by-parameter and term-by-term, followed by one log
smoothing variance per penalized block that carries a hyperprior. Blocks
with a zero-rank penalty have a flat prior and no variance parameter; blocks
with a positive-rank penalty but no hyperprior have a fixed Gaussian prior
with precision equal to the penalty matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from .design import DesignBlock
from .families import LOG_2PI, Family

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InverseGamma:
    """Conjugate inverse gamma hyperprior for a smoothing variance."""

    a: float = 0.001
    b: float = 0.001

    def __post_init__(self):
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError("inverse gamma parameters must be positive")

    def log_density_log_scale(self, lt: float) -> float:
        """Log density of log(tau2), Jacobian included."""
        return self.a * np.log(self.b) - special.gammaln(self.a) \
            - self.a * lt - self.b * np.exp(-lt)

    def grad_log_scale(self, lt: float) -> float:
        return -self.a + self.b * np.exp(-lt)


@dataclass(frozen=True)
class ScaleDependentWeibull:
    """Weibull hyperprior on tau2 (scale-dependent prior). Not conjugate,
    so it is only available on the fixed-form (non-Gibbs) path."""

    shape: float = 0.5
    scale: float = 0.0088

    def __post_init__(self):
        if self.shape <= 0.0 or self.scale <= 0.0:
            raise ValueError("Weibull parameters must be positive")

    def log_density_log_scale(self, lt: float) -> float:
        c, s = self.shape, self.scale
        return np.log(c) - c * np.log(s) + c * lt - np.exp(c * (lt - np.log(s)))

    def grad_log_scale(self, lt: float) -> float:
        c, s = self.shape, self.scale
        return c - c * np.exp(c * (lt - np.log(s)))


def log_ig_density(x, shape, scale):
    """Inverse gamma log density on the natural scale."""
    return shape * np.log(scale) - special.gammaln(shape) \
        - (shape + 1.0) * np.log(x) - scale / x


@dataclass(frozen=True)
class BlockInfo:
    """Placement of one design block inside the global parameter vector."""

    label: str
    param: int
    start: int
    stop: int
    rank: int
    tau_index: int | None  # None for flat and fixed-prior blocks

    @property
    def beta_slice(self) -> slice:
        return slice(self.start, self.stop)


class ParamLayout:
    """Index bookkeeping for theta = (beta, log tau2)."""

    def __init__(self, blocks: list[BlockInfo], p_beta: int, p_tau: int):
        self.blocks = blocks
        self.p_beta = p_beta
        self.p_tau = p_tau
        self.p_theta = p_beta + p_tau

    def split(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != self.p_theta:
            raise ValueError(
                f"theta has length {theta.shape[0]}, expected {self.p_theta}"
            )
        return theta[: self.p_beta], theta[self.p_beta:]


class SadrModel:
    """Structured additive distributional regression model.

    Parameters
    ----------
    family : Family
        Response distribution.
    y : array
        Response vector.
    blocks : list of list of DesignBlock
        One term list per distributional parameter, in family order.
    offsets : list of arrays or None
        Optional additive offset per predictor (None entries mean zero).
    """

    def __init__(self, family: Family, y, blocks, offsets=None):
        self.family = family
        self.y = np.asarray(y, dtype=float)
        n = self.y.shape[0]
        if len(blocks) != family.n_params:
            raise ValueError(
                f"family '{family.name}' has {family.n_params} parameters, "
                f"got {len(blocks)} term lists"
            )
        self.blocks = [list(terms) for terms in blocks]
        self.offsets = np.zeros((n, family.n_params))
        if offsets is not None:
            for k, offset in enumerate(offsets):
                if offset is not None:
                    offset = np.asarray(offset, dtype=float)
                    self.offsets[:, k] = offset

        infos: list[BlockInfo] = []
        pos = 0
        tau = 0
        self._designs = []
        self._param_slices = []
        for k, terms in enumerate(self.blocks):
            k_start = pos
            for block in terms:
                if block.design.shape[0] != n:
                    raise ValueError(
                        f"term '{block.label}' has {block.design.shape[0]} rows, "
                        f"expected {n}"
                    )
                tau_index = None
                if block.rank > 0 and block.hyperprior is not None:
                    tau_index = tau
                    tau += 1
                infos.append(
                    BlockInfo(
                        label=block.label,
                        param=k,
                        start=pos,
                        stop=pos + block.dim,
                        rank=block.rank,
                        tau_index=tau_index,
                    )
                )
                pos += block.dim
            self._param_slices.append(slice(k_start, pos))
            if pos > k_start:
                self._designs.append(
                    np.hstack([b.design for b in terms])
                )
            else:
                self._designs.append(np.zeros((n, 0)))
        self.layout = ParamLayout(infos, pos, tau)
        self.n_obs = n

        # per-block prior pieces, precomputed
        self._log_pdet = []
        self._const = []
        for block in self.flat_blocks():
            if block.rank > 0:
                eig = np.linalg.eigvalsh(block.penalty)
                keep = eig[eig > 1e-8 * eig[-1]]
                log_pdet = float(np.sum(np.log(keep)))
            else:
                log_pdet = 0.0
            self._log_pdet.append(log_pdet)
            self._const.append(0.5 * log_pdet - 0.5 * block.rank * LOG_2PI)

    # -- structure ---------------------------------------------------------

    def flat_blocks(self) -> list[DesignBlock]:
        return [block for terms in self.blocks for block in terms]

    @property
    def p_beta(self) -> int:
        return self.layout.p_beta

    @property
    def p_tau(self) -> int:
        return self.layout.p_tau

    @property
    def p_theta(self) -> int:
        return self.layout.p_theta

    def gibbs_eligible(self) -> bool:
        return all(
            isinstance(block.hyperprior, InverseGamma)
            for block in self.flat_blocks()
            if block.rank > 0 and block.hyperprior is not None
        )

    def require_gibbs(self):
        if not self.gibbs_eligible():
            raise ValueError(
                "Gibbs path requires conjugacy: all smoothing-variance "
                "hyperpriors must be inverse gamma"
            )

    # -- predictors and likelihood ------------------------------------------

    def predictors(self, beta: np.ndarray, rows=None) -> np.ndarray:
        """eta[i, k] = offset[i, k] + sum_j (B_jk beta_jk)[i]."""
        beta = np.asarray(beta, dtype=float)
        if beta.shape[0] != self.p_beta:
            raise ValueError(
                f"beta has length {beta.shape[0]}, expected {self.p_beta}"
            )
        if rows is None:
            eta = self.offsets.copy()
            for k, design in enumerate(self._designs):
                if design.shape[1]:
                    eta[:, k] += design @ beta[self._param_slices[k]]
        else:
            eta = self.offsets[rows].copy()
            for k, design in enumerate(self._designs):
                if design.shape[1]:
                    eta[:, k] += design[rows] @ beta[self._param_slices[k]]
        return eta

    def loglik_terms(self, beta, rows=None) -> np.ndarray:
        eta = self.predictors(beta, rows)
        y = self.y if rows is None else self.y[rows]
        return self.family.log_density(y, eta)

    def loglik_terms_and_score(self, beta, rows=None):
        eta = self.predictors(beta, rows)
        y = self.y if rows is None else self.y[rows]
        return self.family.log_density(y, eta), self.family.score_eta(y, eta)

    def beta_grad_from_score(self, score, rows=None, weights=None) -> np.ndarray:
        """Map a per-observation eta-score to the beta gradient."""
        grad = np.zeros(self.p_beta)
        for k, design in enumerate(self._designs):
            if not design.shape[1]:
                continue
            col = score[:, k] if weights is None else score[:, k] * weights
            mat = design if rows is None else design[rows]
            grad[self._param_slices[k]] = mat.T @ col
        return grad

    # -- priors --------------------------------------------------------------

    def log_prior(self, beta, tau_tilde) -> float:
        """Log prior of (beta, log tau2), hyperpriors included."""
        total = 0.0
        for i, (info, block) in enumerate(zip(self.layout.blocks, self.flat_blocks())):
            if block.rank == 0:
                continue
            b = beta[info.beta_slice]
            quad = float(b @ block.penalty @ b)
            if info.tau_index is None:
                total += self._const[i] - 0.5 * quad
            else:
                lt = float(tau_tilde[info.tau_index])
                total += (
                    self._const[i]
                    - 0.5 * info.rank * lt
                    - 0.5 * np.exp(-lt) * quad
                    + block.hyperprior.log_density_log_scale(lt)
                )
        return total

    def log_joint(self, theta) -> float:
        """log g(theta) = log-likelihood + log prior; non-finite values are
        propagated as -inf."""
        beta, tau_tilde = self.layout.split(theta)
        with np.errstate(all="ignore"):
            ll = float(np.sum(self.loglik_terms(beta)))
            value = ll + self.log_prior(beta, tau_tilde)
        if not np.isfinite(value):
            logger.debug("non-finite log joint at |theta|_max = %.3e",
                         float(np.max(np.abs(theta))))
            return -np.inf
        return value

    def grad_log_joint(self, theta) -> np.ndarray:
        beta, tau_tilde = self.layout.split(theta)
        _, score = self.loglik_terms_and_score(beta)
        grad = np.zeros(self.p_theta)
        grad[: self.p_beta] = self.beta_grad_from_score(score)
        self.add_prior_grad(grad, beta, tau_tilde)
        return grad

    def add_prior_grad(self, grad, beta, tau_tilde):
        """Accumulate prior gradients into grad (length p_theta)."""
        for info, block in zip(self.layout.blocks, self.flat_blocks()):
            if block.rank == 0:
                continue
            b = beta[info.beta_slice]
            kb = block.penalty @ b
            if info.tau_index is None:
                grad[info.beta_slice] -= kb
            else:
                lt = float(tau_tilde[info.tau_index])
                inv_tau2 = np.exp(-lt)
                grad[info.beta_slice] -= inv_tau2 * kb
                grad[self.p_beta + info.tau_index] += (
                    -0.5 * info.rank
                    + 0.5 * inv_tau2 * float(b @ kb)
                    + block.hyperprior.grad_log_scale(lt)
                )

    # -- hybrid (Gibbs) path ---------------------------------------------------

    def gibbs_shapes(self) -> np.ndarray:
        """Conditional IG shapes a + rank/2, one per smoothing variance."""
        self.require_gibbs()
        shapes = np.zeros(self.p_tau)
        for info, block in zip(self.layout.blocks, self.flat_blocks()):
            if info.tau_index is not None:
                shapes[info.tau_index] = block.hyperprior.a + 0.5 * info.rank
        return shapes

    def gibbs_scales(self, beta) -> np.ndarray:
        """Conditional IG scales b + beta' K beta / 2 at the given beta."""
        self.require_gibbs()
        scales = np.zeros(self.p_tau)
        for info, block in zip(self.layout.blocks, self.flat_blocks()):
            if info.tau_index is not None:
                b = beta[info.beta_slice]
                scales[info.tau_index] = (
                    block.hyperprior.b + 0.5 * float(b @ block.penalty @ b)
                )
        return scales

    def hybrid_prior_grad(self, beta) -> np.ndarray:
        """Gradient in beta of log p(beta|tau2) + log p(tau2) - log p(tau2|beta,y).

        The drawn tau2 cancels analytically; what remains per block is
        -(a + rank/2) / (b + beta'Kbeta/2) * K beta, the conditional
        posterior mean of the precision times the penalty gradient.
        """
        grad = np.zeros(self.p_beta)
        for info, block in zip(self.layout.blocks, self.flat_blocks()):
            if block.rank == 0:
                continue
            b = beta[info.beta_slice]
            kb = block.penalty @ b
            if info.tau_index is None:
                grad[info.beta_slice] -= kb
            else:
                hyper = block.hyperprior
                shape = hyper.a + 0.5 * info.rank
                scale = hyper.b + 0.5 * float(b @ kb)
                grad[info.beta_slice] -= (shape / scale) * kb
        return grad

    def hybrid_prior_value(self, beta, tau2) -> float:
        """log p(beta|tau2) + log p(tau2) - log p(tau2|beta, y) at drawn tau2."""
        total = 0.0
        for i, (info, block) in enumerate(zip(self.layout.blocks, self.flat_blocks())):
            if block.rank == 0:
                continue
            b = beta[info.beta_slice]
            quad = float(b @ block.penalty @ b)
            if info.tau_index is None:
                total += self._const[i] - 0.5 * quad
                continue
            hyper = block.hyperprior
            t2 = float(tau2[info.tau_index])
            shape = hyper.a + 0.5 * info.rank
            scale = hyper.b + 0.5 * quad
            total += (
                self._const[i]
                - 0.5 * info.rank * np.log(t2)
                - 0.5 * quad / t2
                + log_ig_density(t2, hyper.a, hyper.b)
                - log_ig_density(t2, shape, scale)
            )
        return total

    def grad_log_tau_conditional(self, beta, tau2) -> np.ndarray:
        """Gradient in beta of log p(tau2 | beta, y) at fixed drawn tau2."""
        grad = np.zeros(self.p_beta)
        for info, block in zip(self.layout.blocks, self.flat_blocks()):
            if info.tau_index is None:
                continue
            b = beta[info.beta_slice]
            kb = block.penalty @ b
            hyper = block.hyperprior
            shape = hyper.a + 0.5 * info.rank
            scale = hyper.b + 0.5 * float(b @ kb)
            t2 = float(tau2[info.tau_index])
            grad[info.beta_slice] += (shape / scale) * kb - kb / t2
        return grad
