"""Config parsing, model assembly from tabular data, and fit artifacts.

The run configuration is a JSON document with one predictor block per
distributional parameter; each term is an explicit object (kind, covariates,
basis dimension, hyperprior) rather than a formula string. A fit artifact is
a single JSON file carrying the fitted variational parameters, the term
recipes needed to rebuild design matrices on new data, the ELBO trace, a
config echo and the seed; reloading it reproduces predictions and scores
bit-identically.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import design
from .design import DesignBlock, TermRecipe, TermSpec
from .families import get_family
from .model import InverseGamma, SadrModel, ScaleDependentWeibull
from .optimize import FitResult, RunOptions
from .robust import BetaHyper, RobustOptions

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def _hyperprior_from_config(raw, default):
    if raw is None:
        return default
    kind = raw.get("kind", "inverse_gamma")
    if kind == "inverse_gamma":
        return InverseGamma(a=raw.get("a", 0.001), b=raw.get("b", 0.001))
    if kind in ("weibull", "scale_dependent"):
        return ScaleDependentWeibull(
            shape=raw.get("shape", 0.5), scale=raw.get("scale", 0.0088)
        )
    if kind == "fixed":
        return None
    raise ConfigError(f"unknown hyperprior kind '{kind}'")


def validate_config(config: dict, columns) -> None:
    """Check names and option consistency before any numeric work."""
    columns = set(columns)
    for key in ("response", "family", "predictors"):
        if key not in config:
            raise ConfigError(f"config is missing '{key}'")
    if config["response"] not in columns:
        raise ConfigError(f"response column '{config['response']}' not in data")
    family = get_family(config["family"])
    predictors = config["predictors"]
    if len(predictors) != family.n_params:
        raise ConfigError(
            f"family '{family.name}' needs {family.n_params} predictor "
            f"blocks, got {len(predictors)}"
        )
    uses_weibull = False
    for pred in predictors:
        offset = pred.get("offset")
        if offset is not None and offset not in columns:
            raise ConfigError(f"offset column '{offset}' not in data")
        for term in pred.get("terms", []):
            for cov in term.get("covariates", []):
                if cov not in columns:
                    raise ConfigError(f"covariate column '{cov}' not in data")
            hyper = term.get("hyperprior")
            if hyper and hyper.get("kind") in ("weibull", "scale_dependent"):
                uses_weibull = True
    gibbs = config.get("va", {}).get("gibbs")
    if gibbs and uses_weibull:
        raise ConfigError(
            "Gibbs path requires conjugacy: scale-dependent Weibull "
            "hyperpriors are only available on the fixed-form path"
        )


def _build_term(term: dict, data) -> DesignBlock:
    kind = term["kind"]
    covariates = tuple(term.get("covariates", []))
    hyper = _hyperprior_from_config(term.get("hyperprior"), InverseGamma())
    if kind == "linear":
        return design.build_linear(
            np.asarray(data[covariates[0]]),
            coding=term.get("coding", "dummy"),
            name=covariates[0],
        )
    spec = TermSpec(
        kind=kind,
        covariates=covariates,
        basis_dim=_pair_or_int(term.get("basis_dim", 10)),
        degree=_pair_or_int(term.get("degree", 3)),
        penalty_order=_pair_or_int(term.get("penalty_order", 2)),
        adjacency=tuple(tuple(e) for e in term.get("adjacency", []))
        if term.get("adjacency") is not None else None,
        regions=tuple(term["regions"]) if term.get("regions") else None,
        hyperprior=hyper,
    )
    x = np.asarray(data[covariates[0]], dtype=float) if kind != "mrf" else None
    if kind == "pspline":
        return design.build_pspline(x, spec)
    if kind == "cyclic_pspline":
        return design.build_cyclic_pspline(x, spec)
    if kind == "tensor_pspline":
        x2 = np.asarray(data[covariates[1]], dtype=float)
        return design.build_tensor_pspline(x, x2, spec)
    if kind == "mrf":
        return design.build_mrf(
            np.asarray(data[covariates[0]]),
            spec.adjacency or (),
            regions=spec.regions,
            hyperprior=hyper,
            name=covariates[0],
        )
    raise ConfigError(f"unknown term kind '{kind}'")


def _pair_or_int(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return int(value)


def model_from_config(config: dict, data) -> SadrModel:
    family = get_family(config["family"])
    y = np.asarray(data[config["response"]], dtype=float)
    n = y.shape[0]
    blocks = []
    offsets = []
    for pred in config["predictors"]:
        terms = []
        if pred.get("intercept", True):
            terms.append(design.build_intercept(n))
        for term in pred.get("terms", []):
            terms.append(_build_term(term, data))
        blocks.append(terms)
        offset = pred.get("offset")
        offsets.append(
            np.asarray(data[offset], dtype=float) if offset else None
        )
    return SadrModel(family, y, blocks, offsets)


def _resolve_subsample(raw, n_obs: int) -> int | None:
    """n_sub from config: an integer count, a fraction in (0, 1), or true
    for the default 0.4 fraction."""
    if not raw:
        return None
    if raw is True:
        raw = 0.4
    if isinstance(raw, float) and raw < 1.0:
        return max(1, round(raw * n_obs))
    return int(raw)


def run_options_from_config(config: dict, n_obs: int) -> RunOptions:
    opt = dict(config.get("optimizer", {}))
    va = dict(config.get("va", {}))
    hybrid = va.get("gibbs")
    return RunOptions(
        n_draws=int(opt.get("draws", 1)),
        n_factors=int(va.get("factors", 5)),
        seed=int(opt.get("seed", 1)),
        max_iter=int(opt.get("max_iter", 50_000)),
        hybrid=bool(hybrid) if hybrid is not None else False,
        subsample=_resolve_subsample(opt.get("subsample"), n_obs),
        t0=float(opt.get("t0", 1.0)),
        anneal_interval=int(opt.get("anneal_interval", 100)),
        anneal_end=int(opt.get("anneal_end", 9000)),
        window=int(opt.get("window", 1000)),
        tolerance=float(opt.get("tolerance", 1e-4)),
        init_diag=float(opt.get("init_diag", 0.1)),
        warm_start=bool(opt.get("warm_start", False)),
    )


def resolve_hybrid(config: dict, model: SadrModel) -> bool:
    """Gibbs path defaults to on whenever the model is eligible and has at
    least one smoothing variance; an explicit config value wins."""
    gibbs = config.get("va", {}).get("gibbs")
    if gibbs is None:
        return model.gibbs_eligible() and model.p_tau > 0
    gibbs = bool(gibbs)
    if gibbs:
        model.require_gibbs()
    return gibbs


def robust_options_from_config(config: dict) -> RobustOptions | None:
    raw = config.get("robust")
    if not raw or not raw.get("enabled", False):
        return None
    return RobustOptions(
        prior=BetaHyper(
            a_w=float(raw.get("a_w", 0.2)), b_w=float(raw.get("b_w", 0.01))
        ),
        init_weight=float(raw.get("init_weight", 0.98)),
        init_scale=str(raw.get("init_scale", "weight")),
        init_log_sd=float(raw.get("init_log_sd", 1.0)),
        freeze_weights=bool(raw.get("freeze_weights", False)),
    )


# ---------------------------------------------------------------------------
# artifact serialization
# ---------------------------------------------------------------------------

def _recipe_to_dict(recipe: TermRecipe) -> dict:
    return {
        "kind": recipe.kind,
        "covariates": list(recipe.covariates),
        "degrees": list(recipe.degrees),
        "knots": [k.tolist() for k in recipe.knots],
        "levels": list(recipe.levels),
        "coding": recipe.coding,
        "transform": recipe.transform.tolist()
        if recipe.transform is not None else None,
    }


def _recipe_from_dict(raw: dict) -> TermRecipe:
    return TermRecipe(
        kind=raw["kind"],
        covariates=tuple(raw["covariates"]),
        degrees=tuple(int(d) for d in raw["degrees"]),
        knots=tuple(np.asarray(k, dtype=float) for k in raw["knots"]),
        levels=tuple(raw["levels"]),
        coding=raw["coding"],
        transform=np.asarray(raw["transform"], dtype=float)
        if raw["transform"] is not None else None,
    )


def artifact_from_fit(config: dict, model: SadrModel,
                      result: FitResult) -> dict:
    recipes = [
        [_recipe_to_dict(block.recipe) for block in terms]
        for terms in model.blocks
    ]
    blocks_meta = [
        {
            "label": info.label,
            "param": info.param,
            "start": info.start,
            "stop": info.stop,
            "rank": info.rank,
            "tau_index": info.tau_index,
        }
        for info in model.layout.blocks
    ]
    artifact = {
        "format_version": FORMAT_VERSION,
        "seed": result.seed,
        "family": model.family.name,
        "config": config,
        "hybrid": result.hybrid,
        "layout": {
            "p_beta": model.p_beta,
            "p_tau": model.p_tau,
            "blocks": blocks_meta,
        },
        "recipes": recipes,
        "offsets": [pred.get("offset") for pred in config["predictors"]],
        "va": {
            "mu": result.va.mu.tolist(),
            "factor": result.va.factor.tolist(),
            "diag": result.va.diag.tolist(),
        },
        "n_iter": result.n_iter,
        "status": result.status,
        "elbo_trace": [float(v) for v in result.elbo_trace],
    }
    if result.weight_mu is not None:
        artifact["weights_va"] = {
            "mu": result.weight_mu.tolist(),
            "log_sd": result.weight_log_sd.tolist(),
        }
        artifact["fitted_weights"] = result.fitted_weights.tolist()
    else:
        artifact["weights_va"] = None
    return artifact


def save_artifact(path, artifact: dict) -> None:
    Path(path).write_text(json.dumps(artifact, sort_keys=True, indent=1))


def load_artifact(path) -> dict:
    artifact = json.loads(Path(path).read_text())
    version = artifact.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported artifact format version {version}")
    return artifact


def posterior_beta_mean(artifact: dict) -> np.ndarray:
    return np.asarray(
        artifact["va"]["mu"][: artifact["layout"]["p_beta"]], dtype=float
    )


def design_matrices(artifact: dict, data) -> list[np.ndarray]:
    """Per-parameter stacked design matrices on new data, built from the
    stored recipes."""
    n = len(data)
    matrices = []
    for terms in artifact["recipes"]:
        parts = [
            design.evaluate_recipe(
                _recipe_from_dict(raw),
                {name: np.asarray(data[name]) for name in raw["covariates"]}
                if raw["covariates"] else {"": np.zeros(n)},
            )
            for raw in terms
        ]
        matrices.append(np.hstack(parts) if parts else np.zeros((n, 0)))
    return matrices


def predictive_etas(artifact: dict, data, beta_draws: np.ndarray) -> np.ndarray:
    """eta draws on new data, shape (S, n, K)."""
    matrices = design_matrices(artifact, data)
    beta_draws = np.atleast_2d(np.asarray(beta_draws, dtype=float))
    n = len(data)
    n_params = len(matrices)
    etas = np.zeros((beta_draws.shape[0], n, n_params))
    start = 0
    param_slices = []
    for mat in matrices:
        param_slices.append(slice(start, start + mat.shape[1]))
        start += mat.shape[1]
    for k, (mat, sl) in enumerate(zip(matrices, param_slices)):
        offset_col = artifact["offsets"][k]
        if offset_col:
            etas[:, :, k] += np.asarray(data[offset_col], dtype=float)
        if mat.shape[1]:
            etas[:, :, k] += beta_draws[:, sl] @ mat.T
    return etas
