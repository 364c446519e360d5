"""Command-line interface: fit, predict, score and simulate.

Every command is a pure function of its inputs and a seed: reruns produce
byte-identical outputs. CSV files are RFC-4180 style with a header row;
floats are written with full round-trip precision.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import evaluate, va as va_mod
from .artifact import (
    ConfigError,
    artifact_from_fit,
    load_artifact,
    model_from_config,
    posterior_beta_mean,
    predictive_etas,
    resolve_hybrid,
    robust_options_from_config,
    run_options_from_config,
    save_artifact,
    validate_config,
)
from .families import get_family
from .optimize import run
from .rng import substream
from .robust import run_robust


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                repr(float(v)) if isinstance(v, (float, np.floating)) else v
                for v in row
            ])


def _va_from_artifact(artifact):
    va_raw = artifact["va"]
    return va_mod.FactorGaussianVA(
        np.asarray(va_raw["mu"], dtype=float),
        np.asarray(va_raw["factor"], dtype=float),
        np.asarray(va_raw["diag"], dtype=float),
    )


def _beta_draws(artifact, n_samples, rng):
    va = _va_from_artifact(artifact)
    draws = va_mod.posterior_sample(va, n_samples, rng)
    return draws[:, : artifact["layout"]["p_beta"]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    config = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        config.setdefault("optimizer", {})["seed"] = args.seed
    if args.robust:
        config.setdefault("robust", {})["enabled"] = True
    if args.a_w is not None:
        config.setdefault("robust", {})["a_w"] = args.a_w
    if args.b_w is not None:
        config.setdefault("robust", {})["b_w"] = args.b_w

    data = pd.read_csv(config["data"])
    validate_config(config, data.columns)
    model = model_from_config(config, data)
    options = run_options_from_config(config, len(data))
    options = replace(options, hybrid=resolve_hybrid(config, model))
    robust_opts = robust_options_from_config(config)
    if robust_opts is not None:
        result = run_robust(model, options, robust_opts)
    else:
        result = run(model, options)

    out_dir = Path(args.output or config.get("output", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    artifact = artifact_from_fit(config, model, result)
    save_artifact(out_dir / "artifact.json", artifact)
    _write_csv(
        out_dir / "elbo_trace.csv",
        ["iteration", "elbo"],
        [(t + 1, float(v)) for t, v in enumerate(result.elbo_trace)],
    )
    if result.fitted_weights is not None:
        _write_csv(
            out_dir / "weights.csv",
            ["index", "weight"],
            [(i, float(w)) for i, w in enumerate(result.fitted_weights)],
        )
    print(
        f"fit finished after {result.n_iter} iterations ({result.status}); "
        f"artifact written to {out_dir / 'artifact.json'}"
    )
    return 0


def cmd_predict(args) -> int:
    artifact = load_artifact(args.artifact)
    data = pd.read_csv(args.data)
    family = get_family(artifact["family"])
    levels = sorted(float(q) for q in args.quantiles.split(","))
    seed = args.seed if args.seed is not None else artifact["seed"]
    beta_draws = _beta_draws(artifact, args.samples, substream(seed, "posterior"))
    etas = predictive_etas(artifact, data, beta_draws)
    n_samples, n_obs, _ = etas.shape

    cond_means = np.stack(
        [family.mean(etas[s]) for s in range(n_samples)]
    )
    mean = cond_means.mean(axis=0)
    ci_lo, ci_hi = np.quantile(cond_means, [0.025, 0.975], axis=0)

    score_rng = substream(seed, "scoring")
    pool = n_samples * args.draws_per_sample
    pred_q = np.empty((len(levels), n_obs))
    chunk = max(1, 2_000_000 // pool)
    for start in range(0, n_obs, chunk):
        stop = min(start + chunk, n_obs)
        draws = np.empty((pool, stop - start))
        for s in range(n_samples):
            draws[s * args.draws_per_sample:(s + 1) * args.draws_per_sample] = (
                family.sample(
                    etas[s, start:stop], score_rng,
                    size=(args.draws_per_sample, stop - start),
                )
            )
        pred_q[:, start:stop] = np.quantile(draws, levels, axis=0)

    header = ["row", "mean", "mean_q025", "mean_q975"] + [
        f"q{level:g}" for level in levels
    ]
    rows = [
        [i, float(mean[i]), float(ci_lo[i]), float(ci_hi[i])]
        + [float(pred_q[j, i]) for j in range(len(levels))]
        for i in range(n_obs)
    ]
    _write_csv(args.out, header, rows)
    print(f"predictions for {n_obs} rows written to {args.out}")
    return 0


def cmd_score(args) -> int:
    artifact = load_artifact(args.artifact)
    data = pd.read_csv(args.data)
    config = artifact["config"]
    response = config["response"]
    needed = {response}
    for terms in artifact["recipes"]:
        for term in terms:
            needed.update(term["covariates"])
    for offset in artifact["offsets"]:
        if offset:
            needed.add(offset)
    missing = needed - set(data.columns)
    if missing:
        raise ConfigError(f"evaluation data is missing columns: {sorted(missing)}")

    family = get_family(artifact["family"])
    y = np.asarray(data[response], dtype=float)
    seed = args.seed if args.seed is not None else artifact["seed"]
    beta_draws = _beta_draws(artifact, args.samples, substream(seed, "posterior"))
    etas = predictive_etas(artifact, data, beta_draws)

    ls = evaluate.log_score(family, etas, y)
    waic_value, _, p_waic = evaluate.waic(family, etas, y)
    if family.discrete:
        crps_value = None
    else:
        crps_value = evaluate.crps(
            family, etas, y, substream(seed, "scoring"),
            draws_per_sample=args.draws_per_sample,
        )
    report = {"ls": ls, "crps": crps_value, "waic": waic_value, "p_waic": p_waic}
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=1))
    if args.residuals:
        eta_hat = predictive_etas(
            artifact, data, posterior_beta_mean(artifact)[None, :]
        )[0]
        residuals = evaluate.quantile_residuals(
            family, eta_hat, y, substream(seed, "residuals")
        )
        _write_csv(
            args.residuals,
            ["index", "residual"],
            [(i, float(r)) for i, r in enumerate(residuals)],
        )
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    artifact = load_artifact(args.artifact)
    config = artifact["config"]
    data = pd.read_csv(args.data or config["data"])
    family = get_family(artifact["family"])
    seed = args.seed if args.seed is not None else artifact["seed"]

    beta_hat = posterior_beta_mean(artifact)
    eta = predictive_etas(artifact, data, beta_hat[None, :])[0]
    y_new = family.sample(eta, substream(seed, "simulate"))

    n = len(data)
    flag = np.zeros(n, dtype=int)
    if args.contaminate > 0.0:
        n_bad = int(np.ceil(args.contaminate * n))
        bad = substream(seed, "contaminate").choice(n, size=n_bad, replace=False)
        y_new = y_new.astype(float)
        y_new[bad] += args.shift
        flag[bad] = 1

    response = config["response"]
    covariates = [c for c in data.columns if c != response]
    header = covariates + [response, "contaminated"]
    rows = [
        [data[c].iloc[i] for c in covariates] + [float(y_new[i]), int(flag[i])]
        for i in range(n)
    ]
    _write_csv(args.out, header, rows)
    print(f"simulated replicate with {n} rows written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vireg",
        description="Variational inference for Bayesian structured additive "
                    "distributional regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model from a JSON config")
    fit.add_argument("config")
    fit.add_argument("--output", default=None, help="output directory")
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--robust", action="store_true",
                     help="enable Bayesian data re-weighting")
    fit.add_argument("--a-w", type=float, default=None, dest="a_w")
    fit.add_argument("--b-w", type=float, default=None, dest="b_w")
    fit.set_defaults(func=cmd_fit)

    predict = sub.add_parser("predict", help="predictive means and quantiles")
    predict.add_argument("artifact")
    predict.add_argument("data")
    predict.add_argument("--out", required=True)
    predict.add_argument("--quantiles", default="0.025,0.5,0.975")
    predict.add_argument("--samples", type=int, default=1000)
    predict.add_argument("--draws-per-sample", type=int, default=10,
                         dest="draws_per_sample")
    predict.add_argument("--seed", type=int, default=None)
    predict.set_defaults(func=cmd_predict)

    score = sub.add_parser("score", help="LS/CRPS/WAIC report on new data")
    score.add_argument("artifact")
    score.add_argument("data")
    score.add_argument("--out", required=True)
    score.add_argument("--samples", type=int, default=1000)
    score.add_argument("--draws-per-sample", type=int, default=100,
                       dest="draws_per_sample")
    score.add_argument("--seed", type=int, default=None)
    score.add_argument("--residuals", default=None,
                       help="optional CSV path for normalized quantile residuals")
    score.set_defaults(func=cmd_score)

    simulate = sub.add_parser(
        "simulate", help="simulate a replicate from the fitted model"
    )
    simulate.add_argument("artifact")
    simulate.add_argument("--out", required=True)
    simulate.add_argument("--data", default=None,
                          help="covariate source (defaults to the fit data)")
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--contaminate", type=float, default=0.0,
                          help="fraction of rows to contaminate")
    simulate.add_argument("--shift", type=float, default=10.0,
                          help="response shift for contaminated rows")
    simulate.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
