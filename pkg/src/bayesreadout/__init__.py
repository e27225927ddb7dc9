"""Bayesian readout of qubit occupations from overlapping photon-count histograms."""

__version__ = "0.1.0"

from .bayes_em import EmConfig, EmTrace, run_anchored, run_em, run_em_joint
from .count_model import MixtureModel, ShotRecord, SuperPoissonParams, fit_moments, logpmf, overlap, pmf, sample
from .experiments import RabiModel, RamseyModel, compare_methods, fidelity, fit_rabi, fit_ramsey, generate_experiment
from .posterior_grid import PosteriorGrid, PriorSpec, compute_posterior
from .threshold import ThresholdSpec, choose_threshold, estimate_threshold

__all__ = [
    "EmConfig",
    "EmTrace",
    "MixtureModel",
    "PosteriorGrid",
    "PriorSpec",
    "RabiModel",
    "RamseyModel",
    "ShotRecord",
    "SuperPoissonParams",
    "ThresholdSpec",
    "choose_threshold",
    "compare_methods",
    "compute_posterior",
    "estimate_threshold",
    "fidelity",
    "fit_moments",
    "fit_rabi",
    "fit_ramsey",
    "generate_experiment",
    "logpmf",
    "overlap",
    "pmf",
    "run_anchored",
    "run_em",
    "run_em_joint",
    "sample",
]
