"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; the suite is deterministic (all randomness is seeded).
"""

import json
import time

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from helpers import (
    conjugate_gaussian_model,
    family_term_model,
    finite_diff_gradient,
    pspline_toy_model,
)
from reference_gibbs import gibbs_location_scale
from vireg import evaluate
from vireg.cli import main
from vireg.design import (
    TermSpec,
    build_intercept,
    build_linear,
    build_pspline,
    evaluate_recipe,
)
from vireg.families import get_family
from vireg.model import InverseGamma, SadrModel
from vireg.optimize import AnnealSchedule, RunOptions, run, subsample
from vireg.robust import run_robust
from vireg.rng import substream
from vireg.va import (
    FactorGaussianVA,
    elbo_values,
    gibbs_tau,
    grad_estimate,
    posterior_sample,
)

FAMILIES = ["gaussian", "gamma", "negbin"]
TERM_KINDS = ["linear", "pspline", "cyclic_pspline", "tensor_pspline", "mrf"]


def test_criterion_01_gradient_correctness():
    start = time.time()
    worst = 0.0
    for family_name in FAMILIES:
        for kind in TERM_KINDS:
            model = family_term_model(family_name, kind, n=50, seed=31)
            rng = np.random.default_rng(hash((family_name, kind)) % 2**32)
            for _ in range(20):
                theta = rng.normal(scale=0.3, size=model.p_theta)
                analytic = model.grad_log_joint(theta)
                numeric = finite_diff_gradient(model.log_joint, theta)
                rel = np.max(
                    np.abs(analytic - numeric) / (1.0 + np.abs(analytic))
                )
                worst = max(worst, rel)
                assert rel < 1e-5
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 1 PASS: gradient correctness for "
          f"{len(FAMILIES) * len(TERM_KINDS)} family x term pairs, "
          f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_conjugate_recovery():
    start = time.time()
    model, x, y, mean, cov, log_evidence = conjugate_gaussian_model(
        n=200, p=3, seed=0
    )
    result = run(model, RunOptions(
        seed=1, n_draws=5, n_factors=3, max_iter=12_000
    ))
    mu_err = float(np.max(np.abs(result.va.mu - mean)))
    assert mu_err < 1e-2
    values = elbo_values(model, result.va, 4000, substream(99, "elbo"))
    gap = float(values.mean() - log_evidence)
    assert abs(gap) < 0.05
    elapsed = time.time() - start
    assert elapsed < 120.0
    print(f"\nACCEPTANCE 2 PASS: conjugate recovery, mu err {mu_err:.1e}, "
          f"ELBO gap {gap:+.4f} (log Z {log_evidence:.3f}), {elapsed:.1f}s")


def test_criterion_03_gibbs_step_law():
    model, _, _ = pspline_toy_model(n=80, basis_dim=10)
    # shape is exactly a + rank/2 = 0.001 + 8/2
    assert model.gibbs_shapes()[0] == 4.001
    rng = np.random.default_rng(40)
    beta = rng.normal(scale=0.5, size=model.p_beta)
    n_draws = 100_000
    draws = gibbs_tau(
        model, np.tile(beta, (n_draws, 1)), np.random.default_rng(41)
    )[:, 0]
    shape = model.gibbs_shapes()[0]
    scale = model.gibbs_scales(beta)[0]
    target_mean = scale / (shape - 1.0)
    target_var = scale**2 / ((shape - 1.0) ** 2 * (shape - 2.0))
    se_mean = draws.std(ddof=1) / np.sqrt(n_draws)
    assert abs(draws.mean() - target_mean) < 3 * se_mean
    # delta-method standard error of the sample variance from the empirical
    # fourth moment (heavy-tailed at shape 4.001, hence estimated from data)
    centered = draws - draws.mean()
    m4 = np.mean(centered**4)
    var_hat = draws.var(ddof=1)
    se_var = np.sqrt(max(m4 - var_hat**2, 0.0) / n_draws)
    assert abs(var_hat - target_var) < 3 * se_var
    print(f"\nACCEPTANCE 3 PASS: Gibbs law, shape 4.001 exact, "
          f"mean {draws.mean():.4f} vs {target_mean:.4f} "
          f"(3se {3 * se_mean:.4f}), var within 3se")


def _reference_gradient(model, va, x, sigma2, prior_precision, n_total=1_000_000):
    """Vectorized 10^6-draw reference for the conjugate toy's lambda-gradient."""
    precision = x.T @ x / sigma2 + prior_precision
    lin = x.T @ model.y / sigma2
    sigma_inv = np.linalg.inv(va.covariance())
    rows, cols = va.pattern()
    rng = np.random.default_rng(4242)
    p, k = va.dim, va.n_factors
    n_lambda = va.n_lambda()
    total = np.zeros(n_lambda)
    total_sq = np.zeros(n_lambda)
    chunk = 200_000
    done = 0
    while done < n_total:
        m = min(chunk, n_total - done)
        xi = rng.standard_normal((m, k))
        eps = rng.standard_normal((m, p))
        theta = va.mu + xi @ va.factor.T + eps * va.diag
        g = lin - theta @ precision + (theta - va.mu) @ sigma_inv
        lam = np.concatenate(
            [g, g[:, rows] * xi[:, cols], g * eps], axis=1
        )
        total += lam.sum(axis=0)
        total_sq += (lam**2).sum(axis=0)
        done += m
    mean = total / n_total
    var = total_sq / n_total - mean**2
    return mean, var / n_total


def test_criterion_04_estimator_unbiasedness():
    model, x, y, _, _, _ = conjugate_gaussian_model(n=100, p=3, seed=2)
    va = FactorGaussianVA(
        np.array([0.3, -0.2, 0.1]),
        np.tril(np.random.default_rng(50).normal(scale=0.3, size=(3, 2))),
        np.array([0.5, 0.8, 0.6]),
    )
    ref_mean, ref_var = _reference_gradient(model, va, x, 1.0, np.eye(3))

    n_rep = 10_000
    rng = np.random.default_rng(51)
    singles = np.empty((n_rep, va.n_lambda()))
    for r in range(n_rep):
        singles[r], _ = grad_estimate(model, va, 1, rng)
    err = np.abs(singles.mean(axis=0) - ref_mean)
    se = np.sqrt(singles.var(axis=0, ddof=1) / n_rep + ref_var)
    assert np.all(err < 3 * se)

    # subsampled estimator: n = 100, n_sub = 40, weight 2.5
    sub_rng = np.random.default_rng(52)
    draw_rng = np.random.default_rng(53)
    singles_sub = np.empty((n_rep, va.n_lambda()))
    for r in range(n_rep):
        rows = subsample(sub_rng, 100, 40)
        assert 100 / len(rows) == 2.5
        singles_sub[r], _ = grad_estimate(model, va, 1, draw_rng, rows=rows)
    err_sub = np.abs(singles_sub.mean(axis=0) - ref_mean)
    se_sub = np.sqrt(singles_sub.var(axis=0, ddof=1) / n_rep + ref_var)
    assert np.all(err_sub < 3 * se_sub)
    print(f"\nACCEPTANCE 4 PASS: single-draw estimator unbiased vs 1e6-draw "
          f"reference (max z {np.max(err / se):.2f}); subsampled weight-2.5 "
          f"estimator unbiased (max z {np.max(err_sub / se_sub):.2f})")


def test_criterion_05_annealing_identity():
    model, *_ = conjugate_gaussian_model(n=80, p=2, seed=3)
    plain = run(model, RunOptions(seed=4, max_iter=2200, n_factors=2))
    annealed = run(model, RunOptions(seed=4, max_iter=2200, n_factors=2, t0=1.0))
    assert np.array_equal(plain.va.pack(), annealed.va.pack())
    assert np.array_equal(plain.elbo_trace, annealed.elbo_trace)

    schedule = AnnealSchedule(t0=5.0, interval=100, end=9000)
    assert schedule.temperature(4500) == 3.0
    temps = np.array([schedule.temperature(t) for t in range(12_001)])
    assert np.all(np.diff(temps) <= 0.0)
    assert schedule.temperature(9000) == 1.0
    assert np.all(temps[9000:] == 1.0)
    print("\nACCEPTANCE 5 PASS: T0=1 run bit-identical to plain run; "
          "T(4500) = 3 at T0=5, nonincreasing, exactly 1 from the end on")


def test_criterion_06_hybrid_vs_fixed_form_ordering():
    start = time.time()
    wins = 0
    details = []
    for seed in range(10):
        model, _, _ = pspline_toy_model(n=150, seed=60 + seed)
        hyb = run(model, RunOptions(
            seed=seed, hybrid=True, n_factors=3, max_iter=8000
        ))
        fix = run(model, RunOptions(
            seed=seed, hybrid=False, n_factors=3, max_iter=8000
        ))
        vh = elbo_values(
            model, hyb.va, 1500, substream(seed, "eval-h"),
            hybrid=True, gibbs_rng=substream(seed, "eval-g"),
        )
        vf = elbo_values(model, fix.va, 1500, substream(seed, "eval-f"))
        se = np.sqrt(vh.var(ddof=1) / len(vh) + vf.var(ddof=1) / len(vf))
        diff = vh.mean() - vf.mean()
        details.append(diff)
        if diff >= -2.0 * se:
            wins += 1
    assert wins >= 9
    elapsed = time.time() - start
    print(f"\nACCEPTANCE 6 PASS: hybrid ELBO >= fixed-form within 2 MC se in "
          f"{wins}/10 seeds (mean gain {np.mean(details):+.3f}), {elapsed:.0f}s")


def _sadr_dgp(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    z = rng.uniform(-1.0, 1.0, n)
    eta_mu = 1.0 + np.sin(2.0 * np.pi * x)
    eta_sigma = -0.7 + 0.4 * z
    y = eta_mu + np.exp(eta_sigma) * rng.standard_normal(n)
    return x, z, y, eta_mu


def _build_location_scale(x, z, y):
    n = len(y)
    spline = build_pspline(
        x, TermSpec("pspline", ("x",), basis_dim=12, hyperprior=InverseGamma())
    )
    blocks = [
        [build_intercept(n), spline],
        [build_intercept(n), build_linear(z, name="z")],
    ]
    return SadrModel(get_family("gaussian"), y, blocks), spline


def _location_scale_etas(beta_draws, spline, x, z, p_mu):
    n = len(x)
    w = np.hstack([np.ones((n, 1)), evaluate_recipe(spline.recipe, {"x": x})])
    v = np.hstack([np.ones((n, 1)), z.reshape(-1, 1)])
    etas = np.zeros((beta_draws.shape[0], n, 2))
    etas[:, :, 0] = beta_draws[:, :p_mu] @ w.T
    etas[:, :, 1] = beta_draws[:, p_mu:] @ v.T
    return etas


def test_criterion_07_simulation_protocol():
    start = time.time()
    family = get_family("gaussian")
    n = 1000
    crps_vi, crps_mc, rmses = [], [], []
    for rep in range(10):
        x, z, y, eta_mu = _sadr_dgp(n, 700 + rep)
        xt, zt, yt, _ = _sadr_dgp(n, 900 + rep)
        model, spline = _build_location_scale(x, z, y)
        p_mu = 1 + spline.dim

        fit = run(model, RunOptions(
            seed=rep, hybrid=True, n_factors=5, max_iter=9000
        ))
        eta_hat = model.predictors(fit.va.mu)
        rmses.append(np.sqrt(np.mean((eta_hat[:, 0] - eta_mu) ** 2)))

        beta_vi = posterior_sample(fit.va, 500, substream(rep, "post"))
        etas_vi = _location_scale_etas(beta_vi, spline, xt, zt, p_mu)
        crps_vi.append(evaluate.crps(
            family, etas_vi, yt, substream(rep, "crps-vi"), draws_per_sample=20
        ))

        # independent exact-sampler oracle fit of the same model
        design_mu = np.hstack([b.design for b in model.blocks[0]])
        design_sigma = np.hstack([b.design for b in model.blocks[1]])
        penalty = np.zeros((p_mu, p_mu))
        penalty[1:, 1:] = spline.penalty
        beta_mc, gamma_mc = gibbs_location_scale(
            y, design_mu, penalty, design_sigma,
            n_iter=3500, burn=1000, thin=5, seed=rep,
        )
        etas_mc = _location_scale_etas(
            np.hstack([beta_mc, gamma_mc]), spline, xt, zt, p_mu
        )
        crps_mc.append(evaluate.crps(
            family, etas_mc, yt, substream(rep, "crps-mc"), draws_per_sample=20
        ))

    mean_vi = float(np.mean(crps_vi))
    mean_mc = float(np.mean(crps_mc))
    ratio = mean_vi / mean_mc
    assert abs(ratio - 1.0) < 0.05
    assert max(rmses) < 0.1
    elapsed = time.time() - start
    assert elapsed < 600.0
    print(f"\nACCEPTANCE 7 PASS: 10-replicate DGP reproduction, mean CRPS VI "
          f"{mean_vi:.4f} vs oracle {mean_mc:.4f} ({(ratio - 1) * 100:+.2f}%), "
          f"max smooth RMSE {max(rmses):.3f}, {elapsed:.0f}s")


def test_criterion_08_robust_detection():
    start = time.time()
    family = get_family("gaussian")
    n = 300
    weight_splits = 0
    crps_wins = 0
    for rep in range(10):
        rng = np.random.default_rng(800 + rep)
        x = rng.uniform(0, 1, n)
        y = 1.0 + np.sin(2 * np.pi * x) + 0.15 * rng.standard_normal(n)
        n_bad = int(np.ceil(0.05 * n))
        bad = rng.choice(n, n_bad, replace=False)
        y[bad] += 10.0
        flag = np.zeros(n, dtype=bool)
        flag[bad] = True

        xt = rng.uniform(0, 1, n)
        yt = 1.0 + np.sin(2 * np.pi * xt) + 0.15 * rng.standard_normal(n)

        spline = build_pspline(
            x, TermSpec("pspline", ("x",), basis_dim=10,
                        hyperprior=InverseGamma())
        )
        model = SadrModel(
            family, y,
            [[build_intercept(n), spline], [build_intercept(n)]],
        )
        options = RunOptions(seed=rep, hybrid=True, n_factors=4, max_iter=5000)
        robust_fit = run_robust(model, options)
        plain_fit = run(model, options)

        w = robust_fit.fitted_weights
        if w[flag].mean() < w[~flag].mean():
            weight_splits += 1

        def crps_of(fit, tag):
            beta = posterior_sample(fit.va, 300, substream(rep, tag))
            beta = beta[:, : model.p_beta]
            wt = np.hstack([
                np.ones((n, 1)), evaluate_recipe(spline.recipe, {"x": xt})
            ])
            etas = np.zeros((300, n, 2))
            p_mu = 1 + spline.dim
            etas[:, :, 0] = beta[:, :p_mu] @ wt.T
            etas[:, :, 1] = beta[:, p_mu:]
            return evaluate.crps(
                family, etas, yt, substream(rep, "c" + tag),
                draws_per_sample=20,
            )

        if crps_of(robust_fit, "rob") < crps_of(plain_fit, "plain"):
            crps_wins += 1

    assert weight_splits == 10
    assert crps_wins >= 8
    elapsed = time.time() - start
    print(f"\nACCEPTANCE 8 PASS: contaminated points down-weighted in "
          f"{weight_splits}/10 replicates; robust CRPS beats non-robust in "
          f"{crps_wins}/10, {elapsed:.0f}s")


def test_criterion_09_scoring_oracles():
    family = get_family("gaussian")
    # log score, n=2, S=3 brute-force arithmetic
    y = np.array([0.0, 1.0])
    mus = np.array([[0.0, 1.0], [0.5, 0.8], [-0.5, 1.2]])
    sigmas = np.array([[1.0, 1.0], [2.0, 0.5], [1.5, 1.0]])
    etas = np.stack([mus, np.log(sigmas)], axis=-1)
    dens = stats.norm.pdf(y, loc=mus, scale=sigmas)
    ls_oracle = -np.mean(np.log(dens.mean(axis=0)))
    assert evaluate.log_score(family, etas, y) == pytest.approx(
        ls_oracle, abs=1e-12
    )

    # WAIC, n=1, S=2 brute-force arithmetic
    sigma1 = np.exp(1.0 - 0.5 * np.log(2 * np.pi))
    sigma2 = np.exp(2.0 - 0.5 * np.log(2 * np.pi))
    etas2 = np.array([[[0.0, np.log(sigma1)]], [[0.0, np.log(sigma2)]]])
    waic_value, l_waic, p_waic = evaluate.waic(family, etas2, np.zeros(1))
    assert l_waic == pytest.approx(
        np.log(0.5 * (np.exp(-1.0) + np.exp(-2.0))), abs=1e-12
    )
    assert p_waic == pytest.approx(0.5, abs=1e-12)
    assert waic_value == -2.0 * l_waic + 2.0 * p_waic

    # Gaussian CRPS closed form within 3 MC standard errors
    n_draws = 200_000
    value = evaluate.crps(
        family, np.array([[[0.0, 0.0]]]), np.zeros(1),
        np.random.default_rng(90), draws_per_sample=n_draws,
    )
    target = (np.sqrt(2.0) - 1.0) / np.sqrt(np.pi)
    se = 3.0 / np.sqrt(n_draws)
    assert abs(value - target) < 3 * se
    print(f"\nACCEPTANCE 9 PASS: LS/WAIC tiny-instance oracles at 1e-12; "
          f"Gaussian CRPS {value:.5f} vs closed form {target:.5f}")


def test_criterion_10_cli_determinism(tmp_path):
    rng = np.random.default_rng(5)
    n = 120
    x = rng.uniform(0, 1, n)
    y = 1.0 + np.sin(2 * np.pi * x) + 0.3 * rng.standard_normal(n)
    data = tmp_path / "train.csv"
    pd.DataFrame({"x": x, "y": y}).to_csv(data, index=False)
    config = {
        "data": str(data),
        "response": "y",
        "family": "gaussian",
        "predictors": [
            {"intercept": True,
             "terms": [{"kind": "pspline", "covariates": ["x"],
                        "basis_dim": 7}]},
            {"intercept": True, "terms": []},
        ],
        "va": {"factors": 2},
        "optimizer": {"seed": 21, "max_iter": 2100},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))

    outputs = {}
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["fit", str(config_path), "--output", str(out)]) == 0
        artifact = out / "artifact.json"
        pred = tmp_path / f"pred_{tag}.csv"
        rep = tmp_path / f"report_{tag}.json"
        sim = tmp_path / f"sim_{tag}.csv"
        assert main(["predict", str(artifact), str(data), "--out", str(pred),
                     "--samples", "100"]) == 0
        assert main(["score", str(artifact), str(data), "--out", str(rep),
                     "--samples", "100", "--draws-per-sample", "10"]) == 0
        assert main(["simulate", str(artifact), "--out", str(sim),
                     "--seed", "77", "--contaminate", "0.05"]) == 0
        outputs[tag] = [
            artifact.read_bytes(), pred.read_bytes(),
            rep.read_bytes(), sim.read_bytes(),
        ]
    for got_a, got_b in zip(outputs["a"], outputs["b"]):
        assert got_a == got_b
    print("\nACCEPTANCE 10 PASS: fit/predict/score/simulate byte-identical "
          "on rerun with the same seed")
