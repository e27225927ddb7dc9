"""Exact posterior over the bright occupation on a uniform grid.

The posterior ``P(l | {n_i}) ∝ P(l) prod_i [(1 - l) g(n_i) + l f(n_i)]`` is
accumulated in log space and normalised by log-sum-exp. Duplicate counts are
collapsed into a histogram first; this is exact and makes the cost scale with
the number of distinct counts rather than the number of shots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .count_model import SuperPoissonParams, as_counts, logpmf
from .errors import InvariantViolation, NumericalDomainError, ParameterDomainError

DEFAULT_GRID_SIZE = 1001
NORMALIZATION_TOL = 1e-9


def grid_nodes(L: int) -> np.ndarray:
    if int(L) != L or L < 2:
        raise ParameterDomainError(f"grid size must be an integer >= 2, got {L!r}")
    return np.linspace(0.0, 1.0, int(L))


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "uniform"
    masses: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "grid"):
            raise ParameterDomainError(f"unknown prior kind {self.kind!r}")
        if self.kind == "grid":
            if self.masses is None:
                raise ParameterDomainError("grid-valued prior needs masses")
            m = np.asarray(self.masses, dtype=np.float64)
            if m.ndim != 1 or np.any(~np.isfinite(m)) or np.any(m < 0):
                raise ParameterDomainError("prior masses must be finite and non-negative")
            if abs(m.sum() - 1.0) > NORMALIZATION_TOL:
                raise ParameterDomainError(f"prior masses sum to {m.sum()!r}, not 1")
            object.__setattr__(self, "masses", tuple(m.tolist()))
        elif self.masses is not None:
            raise ParameterDomainError("uniform prior takes no masses")

    @classmethod
    def uniform(cls) -> "PriorSpec":
        return cls("uniform")

    @classmethod
    def from_masses(cls, masses) -> "PriorSpec":
        return cls("grid", tuple(np.asarray(masses, dtype=np.float64).tolist()))

    def log_masses(self, L: int) -> np.ndarray:
        """Log prior at the ``L`` grid nodes, up to an additive constant."""
        if self.kind == "uniform":
            return np.zeros(L)
        m = np.asarray(self.masses)
        if m.size != L:
            raise ParameterDomainError(f"prior has {m.size} masses but the grid has {L} nodes")
        with np.errstate(divide="ignore"):
            return np.log(m)


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    nodes: np.ndarray
    masses: np.ndarray
    mean: float
    sd: float

    @classmethod
    def from_masses(cls, nodes, masses) -> "PosteriorGrid":
        nodes = np.asarray(nodes, dtype=np.float64)
        masses = np.asarray(masses, dtype=np.float64)
        if nodes.shape != masses.shape or nodes.ndim != 1:
            raise ParameterDomainError("nodes and masses must be 1-d arrays of equal length")
        mean, sd = _moments(nodes, masses)
        return cls(nodes, masses, mean, sd)

    @property
    def L(self) -> int:
        return int(self.nodes.size)


def _moments(nodes, masses):
    mean = float(np.dot(masses, nodes))
    var = float(np.dot(masses, (nodes - mean) ** 2))
    return mean, float(np.sqrt(max(var, 0.0)))


def posterior_moments(grid: PosteriorGrid) -> tuple[float, float]:
    """Discrete mean and standard deviation of a normalised grid posterior."""
    masses = np.asarray(grid.masses)
    if np.any(masses < 0) or abs(masses.sum() - 1.0) > NORMALIZATION_TOL:
        raise InvariantViolation(f"posterior masses sum to {masses.sum()!r}")
    return _moments(np.asarray(grid.nodes), masses)


def log_mixture_terms(log_g, log_f, nodes):
    """``log[(1 - l) g + l f]`` for each count (rows) and grid node (columns).

    Each row is scaled by ``max(g, f)`` so that neither term can overflow;
    the end nodes ``l = 0`` and ``l = 1`` are set exactly.
    """
    log_g = np.asarray(log_g, dtype=np.float64)
    log_f = np.asarray(log_f, dtype=np.float64)
    top = np.maximum(log_g, log_f)
    a = np.exp(log_g - top)
    b = np.exp(log_f - top)
    with np.errstate(divide="ignore"):
        terms = np.multiply.outer(a, 1.0 - nodes)
        terms += np.multiply.outer(b, nodes)
        np.log(terms, out=terms)
    terms += top[:, None]
    if nodes[0] == 0.0:
        terms[:, 0] = log_g
    if nodes[-1] == 1.0:
        terms[:, -1] = log_f
    return terms


def summed_log_mixture(log_g, log_f, nodes, block: int = 256):
    """Row sum of :func:`log_mixture_terms`, built ``block`` counts at a time.

    Same arithmetic as :func:`log_mixture_terms`, but into two reused
    buffers: fresh multi-megabyte temporaries per block cost as much in page
    faults as the logs themselves.
    """
    log_g = np.asarray(log_g, dtype=np.float64)
    log_f = np.asarray(log_f, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.float64)
    total = np.zeros(nodes.size)
    m = min(block, log_g.size)
    buf, tmp = np.empty((m, nodes.size)), np.empty((m, nodes.size))
    one_minus = 1.0 - nodes
    for i in range(0, log_g.size, block):
        lg, lf = log_g[i : i + block], log_f[i : i + block]
        k = lg.size
        t, u = buf[:k], tmp[:k]
        top = np.maximum(lg, lf)
        np.multiply(np.exp(lg - top)[:, None], one_minus, out=t)
        np.multiply(np.exp(lf - top)[:, None], nodes, out=u)
        t += u
        with np.errstate(divide="ignore"):
            np.log(t, out=t)
        t += top[:, None]
        if nodes[0] == 0.0:
            t[:, 0] = lg
        if nodes[-1] == 1.0:
            t[:, -1] = lf
        total += t.sum(axis=0)
    return total


def log_likelihood_grid(counts, g: SuperPoissonParams, f: SuperPoissonParams, nodes, collapse: bool = True):
    """Data log-likelihood at every grid node.

    With ``collapse=False`` every shot is evaluated separately (in ascending
    count order); the result is the same up to floating-point rounding.
    """
    n = as_counts(counts)
    nodes = np.asarray(nodes, dtype=np.float64)
    if n.size == 0:
        return np.zeros(nodes.size)
    if collapse:
        values, mult = np.unique(n, return_counts=True)
        terms = log_mixture_terms(logpmf(g, values), logpmf(f, values), nodes)
        return mult.astype(np.float64) @ terms
    n = np.sort(n)
    return summed_log_mixture(logpmf(g, n), logpmf(f, n), nodes)


def normalize_log(log_post: np.ndarray) -> np.ndarray:
    if np.any(np.isnan(log_post)) or np.any(log_post == np.inf):
        raise NumericalDomainError("log posterior is not finite")
    top = log_post.max()
    if not np.isfinite(top):
        raise NumericalDomainError("posterior vanishes at every grid node")
    masses = np.exp(log_post - top)
    return masses / masses.sum()


def compute_posterior(
    counts,
    g: SuperPoissonParams,
    f: SuperPoissonParams,
    prior: PriorSpec | None = None,
    L: int = DEFAULT_GRID_SIZE,
    collapse: bool = True,
) -> PosteriorGrid:
    """Posterior over ``l`` given both count laws (the strongly anchored case)."""
    prior = prior or PriorSpec.uniform()
    nodes = grid_nodes(L)
    log_post = log_likelihood_grid(counts, g, f, nodes, collapse=collapse) + prior.log_masses(nodes.size)
    return PosteriorGrid.from_masses(nodes, normalize_log(log_post))
