"""Amortized E-step: a permutation-invariant network over per-shot likelihood ratios."""

from __future__ import annotations

from dataclasses import replace

from ..bayes_em import EmConfig, run_em, run_em_joint
from ..errors import ConfigError
from .model import (
    ArchitectureSpec,
    AuxFeatures,
    NetworkWeights,
    encode_shots,
    forward,
    forward_counts,
    init_weights,
    kl_loss,
)
from .training import OptimizerConfig, TrainingRanges, TrainingSet, evaluate_kl, generate_training_set, train
from .weights_io import default_weights_path, load_weights, save_weights


def _network_config(config, weights):
    config = config or EmConfig()
    weights = weights if weights is not None else config.network
    if weights is None:
        raise ConfigError("network EM needs trained weights", field="weights")
    return replace(config, e_step_engine="network", network=weights)


def run_em_network(counts, g, prior=None, config=None, weights=None):
    """Weakly anchored EM with the network standing in for the exact E-step."""
    return run_em(counts, g, prior, _network_config(config, weights))


def run_em_network_joint(records, g, prior=None, config=None, weights=None):
    return run_em_joint(records, g, prior, _network_config(config, weights))


def load_default_weights() -> NetworkWeights:
    path = default_weights_path()
    if not path.exists():
        raise ConfigError(f"no bundled network weights at {path}; run `bayesreadout train` first", field="weights")
    return load_weights(path)


__all__ = [
    "ArchitectureSpec",
    "AuxFeatures",
    "NetworkWeights",
    "OptimizerConfig",
    "TrainingRanges",
    "TrainingSet",
    "default_weights_path",
    "encode_shots",
    "evaluate_kl",
    "forward",
    "forward_counts",
    "generate_training_set",
    "init_weights",
    "kl_loss",
    "load_default_weights",
    "load_weights",
    "run_em_network",
    "run_em_network_joint",
    "save_weights",
    "train",
]
