"""Threshold-discrimination baseline.

A shot is called bright when its count exceeds ``n_th``; the occupation
estimate is the bright fraction ``N_> / N`` with no readout-error correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .count_model import SuperPoissonParams, as_counts, pmf
from .errors import ParameterDomainError


@dataclass(frozen=True)
class ThresholdSpec:
    n_th: int
    dark_above: float  # P(n > n_th | dark)
    bright_below: float  # P(n <= n_th | bright)

    def __post_init__(self):
        if int(self.n_th) != self.n_th or self.n_th < 0:
            raise ParameterDomainError(f"n_th must be a non-negative integer, got {self.n_th!r}")
        for rate in (self.dark_above, self.bright_below):
            if not 0.0 <= rate <= 1.0:
                raise ParameterDomainError(f"misclassification rate {rate!r} outside [0, 1]")
        object.__setattr__(self, "n_th", int(self.n_th))

    @property
    def misclassification(self) -> float:
        return self.dark_above + self.bright_below


def misclassification_curve(g: SuperPoissonParams, f: SuperPoissonParams):
    """Dark-above and bright-below rates for every candidate threshold ``t``."""
    t = np.arange(max(g.support_max(), f.support_max()) + 1)
    dark_above = np.clip(1.0 - np.cumsum(pmf(g, t)), 0.0, 1.0)
    bright_below = np.clip(np.cumsum(pmf(f, t)), 0.0, 1.0)
    return t, dark_above, bright_below


def choose_threshold(g: SuperPoissonParams, f: SuperPoissonParams) -> ThresholdSpec:
    """Threshold minimising total misclassification; ties go to the smaller ``t``."""
    t, dark_above, bright_below = misclassification_curve(g, f)
    k = int(np.argmin(dark_above + bright_below))  # argmin returns the first minimum
    return ThresholdSpec(int(t[k]), float(dark_above[k]), float(bright_below[k]))


def estimate_threshold(counts, spec: ThresholdSpec | int) -> float:
    n = as_counts(counts)
    if n.size == 0:
        raise ParameterDomainError("threshold estimate needs at least one shot")
    n_th = spec.n_th if isinstance(spec, ThresholdSpec) else int(spec)
    return float(np.count_nonzero(n > n_th)) / n.size
