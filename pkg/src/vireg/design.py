"""Design matrices, penalty matrices and identifiability constraints.

Every term of an additive predictor is represented by a :class:`DesignBlock`
holding the (constrained) design matrix, the base penalty matrix ``K`` such
that the prior precision is ``K / tau2``, the numerical penalty rank, and the
orthonormal null-space transform used to absorb linear constraints.

Supported term types: linear effects of continuous or categorical covariates,
P-splines with difference penalties, their cyclic variant, tensor-product
P-splines with a Kronecker-sum penalty, and Markov-random-field terms for
discrete spatial effects.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from math import comb

import numpy as np
from scipy.interpolate import BSpline

logger = logging.getLogger(__name__)

# Relative tolerance for the numerical rank of a penalty matrix.
RANK_RTOL = 1e-8
# Relative tolerance below which negative penalty eigenvalues are rejected.
PSD_RTOL = 1e-10


@dataclass(frozen=True)
class TermSpec:
    """Configuration of one additive term.

    Parameters
    ----------
    kind : str
        One of ``linear``, ``pspline``, ``cyclic_pspline``, ``tensor_pspline``,
        ``mrf``.
    covariates : tuple of str
        Covariate names (one entry, or two for tensor terms).
    basis_dim : int or (int, int)
        Number of basis functions per margin.
    degree : int or (int, int)
        Spline degree per margin.
    penalty_order : int or (int, int)
        Order of the difference penalty per margin.
    adjacency : tuple of (str, str), optional
        Undirected neighbourhood edges for ``mrf`` terms.
    regions : tuple of str, optional
        Explicit region list for ``mrf`` terms; defaults to the nodes that
        appear in the adjacency list.
    coding : str
        ``dummy`` or ``effect`` coding for categorical linear terms.
    hyperprior : object, optional
        Smoothing-variance hyperprior (see :mod:`vireg.model`), or ``None``
        for a fixed prior precision.
    """

    kind: str
    covariates: tuple[str, ...]
    basis_dim: int | tuple[int, int] = 10
    degree: int | tuple[int, int] = 3
    penalty_order: int | tuple[int, int] = 2
    adjacency: tuple[tuple[str, str], ...] | None = None
    regions: tuple[str, ...] | None = None
    coding: str = "dummy"
    hyperprior: object | None = None

    def margins(self) -> list[tuple[int, int, int]]:
        """(basis_dim, degree, penalty_order) per margin."""
        n_margins = 2 if self.kind == "tensor_pspline" else 1

        def expand(value):
            if isinstance(value, tuple):
                return value
            return (value,) * n_margins

        dims = expand(self.basis_dim)
        degs = expand(self.degree)
        orders = expand(self.penalty_order)
        return [(int(d), int(g), int(r)) for d, g, r in zip(dims, degs, orders)]

    def __post_init__(self):
        if self.kind in ("pspline", "cyclic_pspline", "tensor_pspline"):
            for dim, degree, order in self.margins():
                if dim < degree + 1:
                    raise ValueError(
                        f"basis_dim {dim} must be at least degree + 1 = {degree + 1}"
                    )
                if dim <= order:
                    raise ValueError(
                        f"basis_dim {dim} must exceed penalty order {order}"
                    )
        if self.kind == "mrf":
            _validate_adjacency(self.adjacency or ())


@dataclass(frozen=True)
class TermRecipe:
    """Everything needed to rebuild a term's design matrix on new data."""

    kind: str
    covariates: tuple[str, ...]
    degrees: tuple[int, ...] = ()
    knots: tuple[np.ndarray, ...] = ()
    levels: tuple[str, ...] = ()
    coding: str = ""
    transform: np.ndarray | None = None


@dataclass(frozen=True)
class DesignBlock:
    """One term's design matrix, base penalty and constraint information.

    ``penalty`` is the base matrix ``K`` so that the prior precision at
    smoothing variance ``tau2`` is ``K / tau2``; ``rank`` is its numerical
    rank; ``transform`` maps constrained coefficients back to the original
    parametrization (identity columns when no constraint was absorbed).
    """

    label: str
    design: np.ndarray
    penalty: np.ndarray
    rank: int
    transform: np.ndarray
    recipe: TermRecipe | None = None
    hyperprior: object | None = field(default=None, compare=False)

    @property
    def dim(self) -> int:
        return self.design.shape[1]

    def functions(self, beta: np.ndarray) -> np.ndarray:
        """Evaluate the term, ``design @ beta``."""
        return self.design @ np.asarray(beta, dtype=float)


def penalty_to_csv(block: DesignBlock, path) -> None:
    """Write a block's base penalty matrix as plain CSV (golden-file use)."""
    np.savetxt(path, block.penalty, delimiter=",", fmt="%.17g")


def penalty_rank(penalty: np.ndarray) -> int:
    """Numerical rank of a PSD penalty via its eigenvalues."""
    if penalty.size == 0:
        return 0
    eigvals = np.linalg.eigvalsh(penalty)
    lam_max = float(eigvals[-1])
    if lam_max <= 0.0:
        return 0
    return int(np.sum(eigvals > RANK_RTOL * lam_max))


def _validate_penalty(penalty: np.ndarray, label: str) -> np.ndarray:
    sym_err = np.max(np.abs(penalty - penalty.T)) if penalty.size else 0.0
    scale = max(np.max(np.abs(penalty)) if penalty.size else 0.0, 1.0)
    if sym_err > 1e-12 * scale:
        raise ValueError(f"penalty of term '{label}' is not symmetric")
    penalty = 0.5 * (penalty + penalty.T)
    if penalty.size:
        eigvals = np.linalg.eigvalsh(penalty)
        lam_max = max(float(eigvals[-1]), 0.0)
        if eigvals[0] < -PSD_RTOL * max(lam_max, 1.0):
            raise ValueError(f"penalty of term '{label}' has negative eigenvalues")
    return penalty


def _finalize(label, design, penalty, transform, recipe, hyperprior) -> DesignBlock:
    penalty = _validate_penalty(np.asarray(penalty, dtype=float), label)
    return DesignBlock(
        label=label,
        design=np.asarray(design, dtype=float),
        penalty=penalty,
        rank=penalty_rank(penalty),
        transform=np.asarray(transform, dtype=float),
        recipe=recipe,
        hyperprior=hyperprior,
    )


def _check_finite(x: np.ndarray, name: str):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"covariate '{name}' contains NaN or infinite values")


# ---------------------------------------------------------------------------
# linear terms
# ---------------------------------------------------------------------------

def build_intercept(n: int, label: str = "intercept") -> DesignBlock:
    """Constant column with a flat prior."""
    design = np.ones((n, 1))
    recipe = TermRecipe(kind="intercept", covariates=())
    return _finalize(label, design, np.zeros((1, 1)), np.eye(1), recipe, None)


def build_linear(
    values: np.ndarray,
    coding: str = "dummy",
    name: str = "x",
    label: str | None = None,
) -> DesignBlock:
    """Linear effect of a continuous covariate or coded categorical levels.

    Continuous input yields a single column equal to the covariate. For
    categorical input, ``dummy`` coding produces indicator columns for all
    non-reference levels (reference = first sorted level) and ``effect``
    coding replaces the reference rows with -1. Linear blocks carry a flat
    prior (zero penalty, rank 0).
    """
    values = np.asarray(values)
    label = label or f"linear({name})"
    if values.dtype.kind in "fiu":
        column = values.astype(float)
        _check_finite(column, name)
        design = column.reshape(-1, 1)
        recipe = TermRecipe(kind="linear", covariates=(name,))
        return _finalize(label, design, np.zeros((1, 1)), np.eye(1), recipe, None)

    levels = tuple(sorted({str(v) for v in values}))
    if len(levels) < 2:
        raise ValueError(f"degenerate covariate '{name}': fewer than 2 levels")
    if coding not in ("dummy", "effect"):
        raise ValueError(f"unknown coding '{coding}'")
    design = _code_categorical(values, levels, coding)
    dim = design.shape[1]
    recipe = TermRecipe(
        kind="categorical", covariates=(name,), levels=levels, coding=coding
    )
    return _finalize(label, design, np.zeros((dim, dim)), np.eye(dim), recipe, None)


def _code_categorical(values, levels, coding) -> np.ndarray:
    index = {lev: i for i, lev in enumerate(levels)}
    n = len(values)
    design = np.zeros((n, len(levels) - 1))
    for row, value in enumerate(values):
        value = str(value)
        if value not in index:
            raise ValueError(f"unknown categorical level '{value}'")
        i = index[value]
        if i > 0:
            design[row, i - 1] = 1.0
        elif coding == "effect":
            design[row, :] = -1.0
    return design


# ---------------------------------------------------------------------------
# spline bases and difference penalties
# ---------------------------------------------------------------------------

def pspline_knots(lo: float, hi: float, basis_dim: int, degree: int) -> np.ndarray:
    """Equidistant knot vector covering [lo, hi] with degree exterior knots
    on each side, yielding exactly ``basis_dim`` B-spline basis functions."""
    if not hi > lo:
        raise ValueError("covariate range is degenerate")
    n_segments = basis_dim - degree
    h = (hi - lo) / n_segments
    return lo + h * np.arange(-degree, n_segments + degree + 1)


def bspline_basis(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Dense B-spline design matrix; x is clamped to the base interval."""
    lo, hi = knots[degree], knots[-degree - 1]
    x = np.clip(np.asarray(x, dtype=float), lo, hi)
    return BSpline.design_matrix(x, knots, degree).toarray()


def difference_matrix(dim: int, order: int) -> np.ndarray:
    """Order-r forward difference matrix, shape (dim - order, dim)."""
    delta = np.eye(dim)
    for _ in range(order):
        delta = np.diff(delta, axis=0)
    return delta


def cyclic_difference_matrix(dim: int, order: int) -> np.ndarray:
    """Difference matrix wrapping around the end, shape (dim, dim)."""
    pattern = np.zeros(dim)
    for j in range(order + 1):
        pattern[j % dim] += (-1.0) ** (order - j) * comb(order, j)
    return np.stack([np.roll(pattern, i) for i in range(dim)])


def build_pspline(
    x: np.ndarray, spec: TermSpec, label: str | None = None
) -> DesignBlock:
    """Penalized B-spline term with an r-th order difference penalty.

    The basis sits on equidistant knots covering the observed range; the
    base penalty is ``D_r' D_r`` with rank ``basis_dim - r``; a centering
    constraint (columns of the design summing to zero) is absorbed.
    """
    x = np.asarray(x, dtype=float)
    name = spec.covariates[0] if spec.covariates else "x"
    _check_finite(x, name)
    dim, degree, order = spec.margins()[0]
    if len(x) < dim:
        warnings.warn(
            f"fewer observations ({len(x)}) than basis functions ({dim}) "
            f"for term on '{name}'",
            UserWarning,
        )
    knots = pspline_knots(float(np.min(x)), float(np.max(x)), dim, degree)
    basis = bspline_basis(x, knots, degree)
    delta = difference_matrix(dim, order)
    penalty = delta.T @ delta
    recipe = TermRecipe(
        kind="pspline", covariates=(name,), degrees=(degree,), knots=(knots,)
    )
    block = _finalize(
        label or f"pspline({name})", basis, penalty, np.eye(dim), recipe,
        spec.hyperprior,
    )
    return absorb_constraint(block, basis.sum(axis=0).reshape(1, -1))


def build_cyclic_pspline(
    x: np.ndarray, spec: TermSpec, label: str | None = None
) -> DesignBlock:
    """P-spline on a periodic domain: knots and difference penalty wrap, so
    the penalty rank is ``basis_dim - 1`` regardless of the order."""
    x = np.asarray(x, dtype=float)
    name = spec.covariates[0] if spec.covariates else "x"
    _check_finite(x, name)
    dim, degree, order = spec.margins()[0]
    if len(x) < dim:
        warnings.warn(
            f"fewer observations ({len(x)}) than basis functions ({dim}) "
            f"for term on '{name}'",
            UserWarning,
        )
    knots = pspline_knots(float(np.min(x)), float(np.max(x)), dim + degree, degree)
    basis = _cyclic_basis(x, knots, degree, dim)
    delta = cyclic_difference_matrix(dim, order)
    penalty = delta.T @ delta
    recipe = TermRecipe(
        kind="cyclic_pspline", covariates=(name,), degrees=(degree,), knots=(knots,)
    )
    block = _finalize(
        label or f"cyclic_pspline({name})", basis, penalty, np.eye(dim), recipe,
        spec.hyperprior,
    )
    return absorb_constraint(block, basis.sum(axis=0).reshape(1, -1))


def _cyclic_basis(x, knots, degree, dim) -> np.ndarray:
    # Fold the last `degree` ordinary basis functions onto the first ones,
    # after wrapping x into the base period.
    lo, hi = knots[degree], knots[-degree - 1]
    period = hi - lo
    x = np.asarray(x, dtype=float)
    wrapped = lo + np.mod(x - lo, period)
    full = bspline_basis(wrapped, knots, degree)
    folded = full[:, :dim].copy()
    folded[:, :degree] += full[:, dim:]
    return folded


def build_tensor_pspline(
    x1: np.ndarray, x2: np.ndarray, spec: TermSpec, label: str | None = None
) -> DesignBlock:
    """Tensor-product P-spline for a smooth interaction surface.

    The design is the row-wise Kronecker product of the marginal bases and
    the base penalty is the Kronecker sum ``K1 (x) I + I (x) K2`` sharing a
    single smoothing variance. A centering constraint is absorbed.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    names = spec.covariates if len(spec.covariates) == 2 else ("x1", "x2")
    _check_finite(x1, names[0])
    _check_finite(x2, names[1])
    (d1, g1, r1), (d2, g2, r2) = spec.margins()
    if d1 * d2 > len(x1):
        warnings.warn(
            f"tensor basis dimension {d1 * d2} exceeds the number of "
            f"observations ({len(x1)})",
            UserWarning,
        )
    knots1 = pspline_knots(float(np.min(x1)), float(np.max(x1)), d1, g1)
    knots2 = pspline_knots(float(np.min(x2)), float(np.max(x2)), d2, g2)
    b1 = bspline_basis(x1, knots1, g1)
    b2 = bspline_basis(x2, knots2, g2)
    basis = row_kronecker(b1, b2)
    k1 = difference_matrix(d1, r1).T @ difference_matrix(d1, r1)
    k2 = difference_matrix(d2, r2).T @ difference_matrix(d2, r2)
    penalty = np.kron(k1, np.eye(d2)) + np.kron(np.eye(d1), k2)
    recipe = TermRecipe(
        kind="tensor_pspline",
        covariates=tuple(names),
        degrees=(g1, g2),
        knots=(knots1, knots2),
    )
    block = _finalize(
        label or f"tensor({names[0]},{names[1]})", basis, penalty,
        np.eye(d1 * d2), recipe, spec.hyperprior,
    )
    return absorb_constraint(block, basis.sum(axis=0).reshape(1, -1))


def row_kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: out[i] = kron(a[i], b[i])."""
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


# ---------------------------------------------------------------------------
# Markov random fields
# ---------------------------------------------------------------------------

def _validate_adjacency(edges):
    for edge in edges:
        if len(edge) != 2:
            raise ValueError(f"adjacency entries must be pairs, got {edge!r}")
        if str(edge[0]) == str(edge[1]):
            raise ValueError(f"self-edge '{edge[0]}' in adjacency list")


def graph_laplacian(nodes: list[str], edges) -> np.ndarray:
    """Graph Laplacian: vertex degrees on the diagonal, -1 for neighbours."""
    index = {node: i for i, node in enumerate(nodes)}
    laplacian = np.zeros((len(nodes), len(nodes)))
    for a, b in edges:
        i, j = index[a], index[b]
        laplacian[i, i] += 1.0
        laplacian[j, j] += 1.0
        laplacian[i, j] -= 1.0
        laplacian[j, i] -= 1.0
    return laplacian


def build_mrf(
    labels: np.ndarray,
    adjacency,
    regions=None,
    hyperprior: object | None = None,
    name: str = "region",
    label: str | None = None,
) -> DesignBlock:
    """Discrete spatial effect with a graph-Laplacian penalty.

    The design matrix holds region indicators; the base penalty is the graph
    Laplacian of the (undirected, simple) neighbourhood graph, with rank
    #regions - #connected components. A sum-to-zero constraint is absorbed
    for every connected component with at least two regions; isolated
    regions keep a flat-prior coefficient and are reported via the logger.
    """
    _validate_adjacency(adjacency)
    edges = sorted({tuple(sorted((str(a), str(b)))) for a, b in adjacency})
    nodes = sorted(
        {str(v) for v in (regions or ())}
        | {v for e in edges for v in e}
        | {str(v) for v in labels}
    )
    index = {node: i for i, node in enumerate(nodes)}
    observed = {str(v) for v in labels}
    missing = observed - set(nodes)
    if missing:
        raise ValueError(f"observed regions not in graph: {sorted(missing)}")

    m = len(nodes)
    laplacian = graph_laplacian(nodes, edges)

    design = np.zeros((len(labels), m))
    for row, value in enumerate(labels):
        design[row, index[str(value)]] = 1.0

    components = _connected_components(m, edges, index)
    isolated = [nodes[next(iter(c))] for c in components if len(c) == 1]
    if isolated:
        logger.warning("isolated regions without neighbours: %s", isolated)

    recipe = TermRecipe(kind="mrf", covariates=(name,), levels=tuple(nodes))
    block = _finalize(
        label or f"mrf({name})", design, laplacian, np.eye(m), recipe, hyperprior
    )
    rows = [
        [1.0 if i in component else 0.0 for i in range(m)]
        for component in components
        if len(component) > 1
    ]
    if rows:
        block = absorb_constraint(block, np.asarray(rows))
    return block


def _connected_components(m, edges, index):
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        ra, rb = find(index[a]), find(index[b])
        if ra != rb:
            parent[ra] = rb
    groups: dict[int, set[int]] = {}
    for i in range(m):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

def absorb_constraint(block: DesignBlock, constraint: np.ndarray) -> DesignBlock:
    """Absorb the linear constraint ``A beta = 0`` by reparameterization.

    Replaces the design by ``B Z`` and the penalty by ``Z' K Z`` where the
    columns of ``Z`` form an orthonormal basis of the null space of ``A``.
    The block's ``transform`` composes with any previously absorbed
    constraint so it always maps back to the original parametrization.
    """
    constraint = np.atleast_2d(np.asarray(constraint, dtype=float))
    dim = block.dim
    if constraint.shape[0] == 0 or not np.any(constraint):
        return block
    if constraint.shape[1] != dim:
        raise ValueError(
            f"constraint has {constraint.shape[1]} columns, expected {dim}"
        )
    rank_a = np.linalg.matrix_rank(constraint)
    if rank_a >= dim:
        raise ValueError("constraint removes all coefficients")
    null = _null_space(constraint)
    design = block.design @ null
    penalty = null.T @ block.penalty @ null
    penalty = _validate_penalty(penalty, block.label)
    transform = block.transform @ null
    recipe = block.recipe
    if recipe is not None:
        recipe = replace(recipe, transform=transform)
    return DesignBlock(
        label=block.label,
        design=design,
        penalty=penalty,
        rank=penalty_rank(penalty),
        transform=transform,
        recipe=recipe,
        hyperprior=block.hyperprior,
    )


def _null_space(a: np.ndarray) -> np.ndarray:
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    tol = max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    return vt[rank:].T


# ---------------------------------------------------------------------------
# evaluating recipes on new data
# ---------------------------------------------------------------------------

def evaluate_recipe(recipe: TermRecipe, data: dict) -> np.ndarray:
    """Rebuild a term's (constrained) design matrix for new covariate data.

    ``data`` maps covariate names to arrays. Continuous covariates outside
    the training range are clamped (wrapped for cyclic terms).
    """
    if recipe.kind == "intercept":
        n = len(next(iter(data.values())))
        raw = np.ones((n, 1))
    elif recipe.kind == "linear":
        raw = np.asarray(data[recipe.covariates[0]], dtype=float).reshape(-1, 1)
    elif recipe.kind == "categorical":
        raw = _code_categorical(
            data[recipe.covariates[0]], recipe.levels, recipe.coding
        )
    elif recipe.kind == "pspline":
        raw = bspline_basis(
            data[recipe.covariates[0]], recipe.knots[0], recipe.degrees[0]
        )
    elif recipe.kind == "cyclic_pspline":
        knots, degree = recipe.knots[0], recipe.degrees[0]
        dim = len(knots) - 2 * degree - 1
        raw = _cyclic_basis(data[recipe.covariates[0]], knots, degree, dim)
    elif recipe.kind == "tensor_pspline":
        b1 = bspline_basis(
            data[recipe.covariates[0]], recipe.knots[0], recipe.degrees[0]
        )
        b2 = bspline_basis(
            data[recipe.covariates[1]], recipe.knots[1], recipe.degrees[1]
        )
        raw = row_kronecker(b1, b2)
    elif recipe.kind == "mrf":
        levels = recipe.levels
        index = {lev: i for i, lev in enumerate(levels)}
        values = data[recipe.covariates[0]]
        raw = np.zeros((len(values), len(levels)))
        for row, value in enumerate(values):
            key = str(value)
            if key not in index:
                raise ValueError(f"unknown region '{key}'")
            raw[row, index[key]] = 1.0
    else:
        raise ValueError(f"unknown term kind '{recipe.kind}'")
    if recipe.transform is not None:
        return raw @ recipe.transform
    return raw
