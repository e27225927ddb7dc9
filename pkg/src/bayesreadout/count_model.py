"""Photon-count distributions for a two-state fluorescence readout.

A single state emits an over-dispersed count distribution, modelled as a
Gamma-Poisson (negative binomial) law with shape ``alpha`` and inverse scale
``beta``::

    mean     = alpha / beta
    variance = alpha * (1 + beta) / beta**2

A qubit with bright-state occupation ``l`` yields the mixture
``(1 - l) * g(n) + l * f(n)`` of the dark law ``g`` and the bright law ``f``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import nbinom

from .errors import DegenerateWeightsError, ParameterDomainError

#: Cumulative tail mass left out when truncating the support.
TAIL_MASS = 1e-10
#: Relative excess of variance over mean below which a moment fit is
#: considered Poisson-like and clamped.
DISPERSION_FLOOR = 1e-3
#: Inverse scale used for the near-Poisson clamp.
POISSON_BETA = 1e3


@dataclass(frozen=True)
class SuperPoissonParams:
    alpha: float
    beta: float
    #: Set by :func:`fit_moments` when the sample variance did not exceed the
    #: mean and the near-Poisson clamp was applied.
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise ParameterDomainError(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value) or value <= 0.0:
                raise ParameterDomainError(f"{name} must be finite and > 0, got {value!r}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_moments(cls, mean: float, variance: float) -> "SuperPoissonParams":
        """Invert the moment relations; requires ``variance > mean > 0``."""
        if not (mean > 0 and variance > mean):
            raise ParameterDomainError(
                f"need variance > mean > 0 for an over-dispersed law, got mean={mean}, variance={variance}"
            )
        beta = mean / (variance - mean)
        return cls(mean * beta, beta)

    @property
    def mean(self) -> float:
        return self.alpha / self.beta

    @property
    def variance(self) -> float:
        return self.alpha * (1.0 + self.beta) / self.beta**2

    @property
    def success_prob(self) -> float:
        """Success probability ``p`` of the equivalent ``nbinom(alpha, p)``."""
        return self.beta / (1.0 + self.beta)

    def logpmf(self, n):
        return logpmf(self, n)

    def pmf(self, n):
        return pmf(self, n)

    def support_max(self, tail: float = TAIL_MASS) -> int:
        return support_max(self, tail)

    def as_tuple(self) -> tuple[float, float]:
        return (self.alpha, self.beta)


def _check_counts(n):
    arr = np.asarray(n)
    if arr.dtype.kind not in "iuf":
        raise ParameterDomainError("counts must be numeric")
    if np.any(arr < 0):
        raise ParameterDomainError("counts must be non-negative")
    return arr


def logpmf(params: SuperPoissonParams, n):
    """Log probability mass of the Gamma-Poisson law at count(s) ``n``."""
    return _logpmf(params, _check_counts(n).astype(np.float64))


def _logpmf(params: SuperPoissonParams, n: np.ndarray, log_n_factorial=None):
    """:func:`logpmf` on validated float counts; ``log n!`` may be passed in."""
    a, b = params.alpha, params.beta
    lnf = gammaln(n + 1.0) if log_n_factorial is None else log_n_factorial
    # log p = -log1p(1/b), log(1-p) = -log1p(b)
    return gammaln(n + a) - gammaln(a) - lnf - a * math.log1p(1.0 / b) - n * math.log1p(b)


def pmf(params: SuperPoissonParams, n):
    return np.exp(logpmf(params, n))


def support_max(params: SuperPoissonParams, tail: float = TAIL_MASS) -> int:
    """Smallest ``n`` whose cumulative mass reaches ``1 - tail``."""
    dist = nbinom(params.alpha, params.success_prob)
    n = int(max(dist.isf(tail), 0))
    while dist.sf(n) > tail:
        n += 1
    while n > 0 and dist.sf(n - 1) <= tail:
        n -= 1
    return n


@dataclass(frozen=True)
class MixtureModel:
    """Dark law ``g``, bright law ``f`` and bright occupation ``l``."""

    g: SuperPoissonParams
    f: SuperPoissonParams
    l: float

    def __post_init__(self):
        l = float(self.l)
        if not (0.0 <= l <= 1.0):
            raise ParameterDomainError(f"occupation must lie in [0, 1], got {self.l!r}")
        object.__setattr__(self, "l", l)

    def pmf(self, n):
        return mixture_pmf(self, n)

    def support_max(self, tail: float = TAIL_MASS) -> int:
        return max(self.g.support_max(tail), self.f.support_max(tail))


def mixture_pmf(model: MixtureModel, n):
    return (1.0 - model.l) * pmf(model.g, n) + model.l * pmf(model.f, n)


def overlap(f: SuperPoissonParams, g: SuperPoissonParams) -> float:
    """Bhattacharyya coefficient ``sum_n sqrt(f(n) g(n))`` of two count laws."""
    n = np.arange(max(f.support_max(), g.support_max()) + 1)
    value = float(np.sum(np.exp(0.5 * (logpmf(f, n) + logpmf(g, n)))))
    return min(value, 1.0)


class ShotRecord:
    """Per-shot ROI photon counts of one measurement setting.

    An empty record is allowed (it represents "no data"); operations that
    need at least one shot check for it themselves.
    """

    __slots__ = ("counts", "roi_id", "exposure_tag")

    def __init__(self, counts, roi_id: str = "roi0", exposure_tag: str = ""):
        arr = np.asarray(counts)
        if arr.ndim != 1:
            arr = arr.reshape(-1)
        if arr.size and arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or np.any(arr != np.rint(arr)):
                raise ParameterDomainError("counts must be integers; use ShotRecord.from_values for analog data")
        if arr.size and arr.dtype.kind not in "iuf":
            raise ParameterDomainError("counts must be integers")
        arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ParameterDomainError("counts must be non-negative")
        arr.setflags(write=False)
        self.counts = arr
        self.roi_id = str(roi_id)
        self.exposure_tag = str(exposure_tag)

    @classmethod
    def from_values(cls, values, roi_id: str = "roi0", exposure_tag: str = "") -> "ShotRecord":
        """Bin analog camera values to integer counts (round half to even)."""
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ParameterDomainError("non-finite count value")
        return cls(np.rint(arr).astype(np.int64), roi_id, exposure_tag)

    @property
    def N(self) -> int:
        return int(self.counts.size)

    def __len__(self):
        return self.N

    def histogram(self):
        """Unique counts (ascending) and their multiplicities."""
        return np.unique(self.counts, return_counts=True)

    def __eq__(self, other):
        if not isinstance(other, ShotRecord):
            return NotImplemented
        return (
            self.roi_id == other.roi_id
            and self.exposure_tag == other.exposure_tag
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self):
        return f"ShotRecord(N={self.N}, roi_id={self.roi_id!r}, exposure_tag={self.exposure_tag!r})"


def as_counts(counts) -> np.ndarray:
    if isinstance(counts, ShotRecord):
        return counts.counts
    return ShotRecord(counts).counts


def sample(model: MixtureModel, N: int, seed: int, roi_id: str = "roi0", exposure_tag: str = "") -> ShotRecord:
    """Draw ``N`` synthetic shots from the mixture.

    Each shot picks bright with probability ``l``, draws a Gamma rate from the
    chosen state's law and then a Poisson count at that rate.
    """
    if int(N) != N or N < 1:
        raise ParameterDomainError(f"N must be a positive integer, got {N!r}")
    rng = np.random.default_rng(seed)
    bright = rng.random(int(N)) < model.l
    shape = np.where(bright, model.f.alpha, model.g.alpha)
    scale = np.where(bright, 1.0 / model.f.beta, 1.0 / model.g.beta)
    counts = rng.poisson(rng.gamma(shape, scale))
    return ShotRecord(counts, roi_id=roi_id, exposure_tag=exposure_tag)


def fit_moments(counts, weights=None) -> SuperPoissonParams:
    """Weighted method-of-moments fit of the Gamma-Poisson law.

    A sample that is not over-dispersed (``v <= m * (1 + 1e-3)``) is mapped to
    the near-Poisson law ``beta = 1e3, alpha = m * beta`` and the result is
    marked ``clamped``.
    """
    n = as_counts(counts).astype(np.float64)
    if weights is None:
        w = np.ones_like(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != n.shape:
            raise ParameterDomainError(f"weights shape {w.shape} does not match counts shape {n.shape}")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ParameterDomainError("weights must be finite and non-negative")
    return _fit_moments(n, w)


def _fit_moments(n: np.ndarray, w: np.ndarray) -> SuperPoissonParams:
    """:func:`fit_moments` on validated float counts and weights."""
    total = w.sum()
    if n.size == 0 or not total > 0:
        raise DegenerateWeightsError("sum of weights must be positive")
    m = float(np.dot(w, n) / total)
    v = float(np.dot(w, (n - m) ** 2) / total)
    if v <= m * (1.0 + DISPERSION_FLOOR):
        # all-zero samples still need a valid (alpha > 0) law
        m = max(m, 1e-9)
        return SuperPoissonParams(m * POISSON_BETA, POISSON_BETA, clamped=True)
    beta = m / (v - m)
    return SuperPoissonParams(m * beta, beta)
