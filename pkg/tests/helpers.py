"""Shared fixtures: small models, conjugate closed forms, test data."""

import numpy as np

from vireg.design import (
    DesignBlock,
    TermSpec,
    build_cyclic_pspline,
    build_intercept,
    build_linear,
    build_mrf,
    build_pspline,
    build_tensor_pspline,
)
from vireg.families import get_family
from vireg.model import InverseGamma, SadrModel


def matrix_block(design, penalty=None, hyperprior=None, label="custom"):
    """Design block from a raw matrix; fixed Gaussian prior when a penalty is
    given without a hyperprior, flat prior otherwise."""
    design = np.asarray(design, dtype=float)
    dim = design.shape[1]
    if penalty is None:
        penalty = np.zeros((dim, dim))
        rank = 0
    else:
        penalty = np.asarray(penalty, dtype=float)
        eig = np.linalg.eigvalsh(penalty)
        rank = int(np.sum(eig > 1e-8 * max(eig[-1], 1e-300)))
    return DesignBlock(
        label=label,
        design=design,
        penalty=penalty,
        rank=rank,
        transform=np.eye(dim),
        recipe=None,
        hyperprior=hyperprior,
    )


def conjugate_gaussian_model(n=200, p=3, sigma=1.0, prior_sd=1.0, seed=0,
                             beta_true=None):
    """Known-variance Gaussian linear model with a N(0, prior_sd^2 I) prior:
    the posterior and the log marginal likelihood are available in closed
    form. Returns (model, X, y, posterior_mean, posterior_cov, log_evidence).
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    if beta_true is None:
        beta_true = rng.normal(size=p)
    y = x @ beta_true + sigma * rng.normal(size=n)

    family = get_family("gaussian")
    block = matrix_block(x, penalty=np.eye(p) / prior_sd**2, label="coef")
    offsets = [None, np.full(n, np.log(sigma))]
    model = SadrModel(family, y, [[block], []], offsets)

    precision = x.T @ x / sigma**2 + np.eye(p) / prior_sd**2
    cov = np.linalg.inv(precision)
    mean = cov @ (x.T @ y) / sigma**2
    marginal_cov = sigma**2 * np.eye(n) + prior_sd**2 * (x @ x.T)
    sign, logdet = np.linalg.slogdet(marginal_cov)
    log_evidence = -0.5 * (
        n * np.log(2.0 * np.pi) + logdet
        + float(y @ np.linalg.solve(marginal_cov, y))
    )
    return model, x, y, mean, cov, log_evidence


def pspline_toy_model(n=150, seed=0, basis_dim=8, hyper=InverseGamma(),
                      family_name="gaussian", sigma=0.4):
    """Gaussian data with one smooth effect: intercept + P-spline on mu,
    intercept on the second parameter. Gibbs-eligible with an IG hyperprior.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    f = np.sin(2.0 * np.pi * x)
    family = get_family(family_name)
    if family_name == "gaussian":
        y = 1.0 + f + sigma * rng.normal(size=n)
    elif family_name == "gamma":
        mu = np.exp(0.5 + 0.8 * f)
        y = rng.gamma(shape=4.0, scale=mu / 4.0)
    else:
        mu = np.exp(0.5 + 0.8 * f)
        y = rng.negative_binomial(3.0, 3.0 / (3.0 + mu)).astype(float)
    spline = build_pspline(
        x, TermSpec("pspline", ("x",), basis_dim=basis_dim, hyperprior=hyper)
    )
    blocks = [[build_intercept(n), spline], [build_intercept(n)]]
    model = SadrModel(family, y, blocks)
    return model, x, y


def term_block(kind, n, rng, hyper=InverseGamma()):
    """One block of the requested kind on synthetic covariates."""
    if kind == "linear":
        return build_linear(rng.normal(size=n), name="z")
    if kind == "pspline":
        spec = TermSpec("pspline", ("x",), basis_dim=7, hyperprior=hyper)
        return build_pspline(rng.uniform(0, 1, n), spec)
    if kind == "cyclic_pspline":
        spec = TermSpec("cyclic_pspline", ("x",), basis_dim=6, hyperprior=hyper)
        return build_cyclic_pspline(rng.uniform(0, 1, n), spec)
    if kind == "tensor_pspline":
        spec = TermSpec(
            "tensor_pspline", ("a", "b"), basis_dim=4, degree=2,
            penalty_order=1, hyperprior=hyper,
        )
        return build_tensor_pspline(
            rng.uniform(0, 1, n), rng.uniform(0, 1, n), spec
        )
    if kind == "mrf":
        labels = rng.choice(["A", "B", "C", "D"], size=n)
        edges = [("A", "B"), ("B", "C"), ("C", "D"), ("D", "A")]
        return build_mrf(labels, edges, hyperprior=hyper)
    raise ValueError(kind)


def family_term_model(family_name, kind, n=60, seed=0):
    """Small model with one term of the given kind on the first parameter."""
    rng = np.random.default_rng(seed)
    family = get_family(family_name)
    block = term_block(kind, n, rng)
    if family_name == "gaussian":
        y = rng.normal(size=n)
    elif family_name == "gamma":
        y = rng.gamma(shape=2.0, scale=1.0, size=n) + 0.05
    else:
        y = rng.poisson(lam=3.0, size=n).astype(float)
    blocks = [[build_intercept(n), block], [build_intercept(n)]]
    return SadrModel(family, y, blocks)


def finite_diff_gradient(fn, theta, h=1e-5):
    """Central-difference oracle for a scalar function of theta."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2.0 * h)
    return grad
