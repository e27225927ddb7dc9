"""Weakly anchored Bayesian-EM.

Only the dark law ``g`` is calibrated. The loop alternates

* an E-step: the grid posterior of ``l`` under the current bright law
  ``f(theta_f)`` and its mean ``lbar``;
* an M-step: per-shot bright weights
  ``w_i = lbar f(n_i) / [(1 - lbar) g(n_i) + lbar f(n_i)]`` followed by a
  weighted moment fit that yields the next ``theta_f``.

:func:`run_em_joint` shares one bright law across several records (e.g. the
time points of one Rabi scan, all taken at the same exposure). The E-step is
still per record; only the M-step pools their weighted shots. With a single
record it is exactly :func:`run_em`.

After the loop the fitted mixture is compared with the dark law alone. If
the log Bayes factor does not exceed ``log N`` (an Occam allowance for the
two fitted bright parameters), the data hold no bright evidence: the bright
law has merely split the dark histogram. The result is then the dark-only
model, ``l = 0``, flagged ``degenerate_bright``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, gammaln

from .count_model import ShotRecord, SuperPoissonParams, _fit_moments, _logpmf, as_counts, fit_moments, logpmf
from .errors import ConfigError, ParameterDomainError
from .posterior_grid import (
    DEFAULT_GRID_SIZE,
    PosteriorGrid,
    PriorSpec,
    compute_posterior,
    grid_nodes,
    log_mixture_terms,
    summed_log_mixture,
    normalize_log,
)

log = logging.getLogger(__name__)

#: Below this total bright weight the bright law is no longer updated.
BRIGHT_WEIGHT_FLOOR = 0.5
ENGINES = ("exact", "network")


@dataclass
class EmConfig:
    max_iter: int = 50
    tol_theta: float = 1e-4
    tol_mean: float = 1e-5
    init_f: SuperPoissonParams | None = None
    grid_size: int = DEFAULT_GRID_SIZE
    e_step_engine: str = "exact"
    network: object | None = None  # pinet.NetworkWeights
    collapse: bool = True
    keep_posteriors: bool = False
    evidence_check: bool = True

    def __post_init__(self):
        # max_iter == 0 is the strongly anchored pass: one E-step with init_f
        if int(self.max_iter) != self.max_iter or self.max_iter < 0:
            raise ConfigError("max_iter must be a non-negative integer", field="max_iter")
        if not (self.tol_theta > 0 and self.tol_mean > 0):
            raise ConfigError("tolerances must be positive", field="tol_theta/tol_mean")
        if self.e_step_engine not in ENGINES:
            raise ConfigError(f"unknown E-step engine {self.e_step_engine!r}", field="e_step_engine")
        grid_nodes(self.grid_size)


@dataclass
class EmIteration:
    theta_f: SuperPoissonParams
    means: tuple
    sds: tuple
    posteriors: tuple | None = None

    @property
    def mean(self) -> float:
        return self.means[0]

    @property
    def sd(self) -> float:
        return self.sds[0]


@dataclass
class EmTrace:
    iterations: list = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    degenerate_bright: bool = False
    log_evidence: float = math.nan
    no_bright_evidence: bool = False

    def theta_path(self) -> np.ndarray:
        """``(m, 2)`` array of ``(alpha_f, beta_f)`` per iteration."""
        return np.array([it.theta_f.as_tuple() for it in self.iterations]).reshape(-1, 2)

    def summary(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "degenerate_bright": self.degenerate_bright,
            "log_bright_evidence": self.log_evidence,
            "no_bright_evidence": self.no_bright_evidence,
        }


def default_init_f(counts) -> SuperPoissonParams:
    """Moment fit to the counts strictly above the empirical median."""
    n = as_counts(counts)
    upper = n[n > np.median(n)]
    if upper.size < 2:
        upper = n
    return fit_moments(upper)


def bright_weights(log_f, log_g, lbar: float) -> np.ndarray:
    """Per-count bright responsibility at scalar occupation ``lbar``."""
    log_f = np.asarray(log_f, dtype=np.float64)
    if lbar <= 0.0:
        return np.zeros_like(log_f)
    if lbar >= 1.0:
        return np.ones_like(log_f)
    with np.errstate(invalid="ignore"):
        s = log_f - np.asarray(log_g, dtype=np.float64)
    return expit(s + np.log(lbar) - np.log1p(-lbar))


class _Record:
    """Per-record count data laid out for repeated E/M steps."""

    def __init__(self, record: ShotRecord, collapse: bool):
        counts = np.sort(as_counts(record))
        if counts.size == 0:
            raise ParameterDomainError(f"record {getattr(record, 'roi_id', '')!r} has no shots")
        self.N = counts.size
        self.collapsed = collapse
        if collapse:
            self.values, mult = np.unique(counts, return_counts=True)
            self.mult = mult.astype(np.float64)
        else:
            self.values = counts
            self.mult = np.ones(counts.size)
        # validated once here; the loop uses the unchecked kernels
        self.fvalues = self.values.astype(np.float64)
        self.log_fact = gammaln(self.fvalues + 1.0)

    def logpmf(self, params: SuperPoissonParams) -> np.ndarray:
        return _logpmf(params, self.fvalues, self.log_fact)


def _exact_posterior(rec: _Record, log_g, log_f, nodes, log_prior) -> PosteriorGrid:
    if rec.collapsed:
        ll = rec.mult @ log_mixture_terms(log_g, log_f, nodes)
    else:
        ll = summed_log_mixture(log_g, log_f, nodes)
    return PosteriorGrid.from_masses(nodes, normalize_log(ll + log_prior))


def _network_posterior(rec: _Record, log_g, log_f, g, f, prior: PriorSpec, weights) -> PosteriorGrid:
    from .pinet.model import AuxFeatures, forward

    s = log_f - log_g
    multiplicity = rec.mult if rec.collapsed else None
    grid = forward(weights, s, AuxFeatures(rec.N, g, f), multiplicity=multiplicity)
    if prior.kind == "uniform":
        return grid
    lp = np.log(np.maximum(grid.masses, 1e-300)) + prior.log_masses(grid.L)
    return PosteriorGrid.from_masses(grid.nodes, normalize_log(lp))


def run_em_joint(
    records: Sequence[ShotRecord],
    g: SuperPoissonParams,
    prior: PriorSpec | None = None,
    config: EmConfig | None = None,
):
    """EM over several records that share one bright law.

    Returns ``(posteriors, theta_f, trace)`` with one posterior per record.
    """
    prior = prior or PriorSpec.uniform()
    config = config or EmConfig()
    if isinstance(records, ShotRecord):
        records = [records]
    if not records:
        raise ParameterDomainError("no records to infer from")
    recs = [_Record(r, config.collapse) for r in records]

    if config.e_step_engine == "network":
        if config.network is None:
            raise ConfigError("network E-step requested but no trained weights were supplied", field="network")
        e_step = lambda rec, lg, lf, f: _network_posterior(rec, lg, lf, g, f, prior, config.network)  # noqa: E731
    else:
        nodes = grid_nodes(config.grid_size)
        log_prior = prior.log_masses(nodes.size)
        e_step = lambda rec, lg, lf, f: _exact_posterior(rec, lg, lf, nodes, log_prior)  # noqa: E731

    all_values = np.concatenate([r.fvalues for r in recs])
    all_mult = np.concatenate([r.mult for r in recs])
    log_g = [r.logpmf(g) for r in recs]
    if config.init_f is not None:
        theta = config.init_f
    else:
        theta = default_init_f(np.repeat(np.concatenate([r.values for r in recs]), all_mult.astype(np.int64)))

    trace = EmTrace()
    prev_means = None
    for m in range(config.max_iter):
        log_f = [r.logpmf(theta) for r in recs]
        posts = [e_step(r, lg, lf, theta) for r, lg, lf in zip(recs, log_g, log_f)]
        means = np.array([p.mean for p in posts])
        weights = np.concatenate(
            [r.mult * bright_weights(lf, lg, p.mean) for r, lg, lf, p in zip(recs, log_g, log_f, posts)]
        )
        it = EmIteration(
            theta,
            tuple(means.tolist()),
            tuple(p.sd for p in posts),
            tuple(posts) if config.keep_posteriors else None,
        )
        trace.iterations.append(it)
        trace.iterations_used = m + 1
        if weights.sum() < BRIGHT_WEIGHT_FLOOR:
            log.info("total bright weight %.3g below floor; freezing theta_f", weights.sum())
            trace.degenerate_bright = True
            break
        new_theta = _fit_moments(all_values, weights)
        d_theta = max(
            abs(new_theta.alpha - theta.alpha) / theta.alpha,
            abs(new_theta.beta - theta.beta) / theta.beta,
        )
        d_mean = np.inf if prev_means is None else float(np.max(np.abs(means - prev_means)))
        theta = new_theta
        prev_means = means
        if d_theta < config.tol_theta and d_mean < config.tol_mean:
            trace.converged = True
            break

    log_f = [r.logpmf(theta) for r in recs]
    posts = [e_step(r, lg, lf, theta) for r, lg, lf in zip(recs, log_g, log_f)]
    if config.evidence_check:
        trace.log_evidence = bright_evidence(recs, log_g, log_f, prior, config.grid_size)
        if not trace.log_evidence > math.log(sum(r.N for r in recs)):
            # the fitted bright law does not beat the dark law alone: report l = 0
            trace.no_bright_evidence = trace.degenerate_bright = True
            posts = [_point_mass_at_zero(p.L) for p in posts]
    return posts, theta, trace


def bright_evidence(recs, log_g, log_f, prior: PriorSpec, L: int) -> float:
    """Log Bayes factor of the fitted mixture against the dark law alone.

    Summed over records: ``log sum_k p_k L(l_k) - log L(0)`` where ``L`` is
    the grid likelihood under the final bright law.
    """
    nodes = grid_nodes(L)
    with np.errstate(divide="ignore"):
        log_prior = prior.log_masses(L) - np.log(np.sum(np.exp(prior.log_masses(L))))
    total = 0.0
    for r, lg, lf in zip(recs, log_g, log_f):
        # always on distinct counts, so per-shot runs do not pay N x L here
        _, first, inv = np.unique(r.values, return_index=True, return_inverse=True)
        mult = np.bincount(inv.reshape(-1), weights=r.mult)
        ll = mult @ log_mixture_terms(lg[first], lf[first], nodes)
        z = ll + log_prior
        top = z.max()
        total += float(top + np.log(np.sum(np.exp(z - top))) - ll[0])
    return total


def _point_mass_at_zero(L: int) -> PosteriorGrid:
    masses = np.zeros(L)
    masses[0] = 1.0
    return PosteriorGrid.from_masses(grid_nodes(L), masses)


def run_em(
    counts: ShotRecord,
    g: SuperPoissonParams,
    prior: PriorSpec | None = None,
    config: EmConfig | None = None,
):
    """Weakly anchored EM on one record; returns ``(posterior, theta_f, trace)``."""
    if not isinstance(counts, ShotRecord):
        counts = ShotRecord(counts)
    posts, theta, trace = run_em_joint([counts], g, prior, config)
    return posts[0], theta, trace


def run_anchored(
    counts,
    g: SuperPoissonParams,
    f: SuperPoissonParams,
    prior: PriorSpec | None = None,
    L: int = DEFAULT_GRID_SIZE,
) -> PosteriorGrid:
    """Strongly anchored inference: both laws calibrated, no iteration."""
    return compute_posterior(counts, g, f, prior, L)


def refit_theta(counts, g: SuperPoissonParams, theta_f: SuperPoissonParams, lbar: float) -> SuperPoissonParams:
    """One M-step from a given ``lbar``; used to check the EM fixed point."""
    n = as_counts(counts)
    return fit_moments(n, bright_weights(logpmf(theta_f, n), logpmf(g, n), lbar))
