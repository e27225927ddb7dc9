"""Simulated training data and the training loop for the posterior network."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..count_model import MixtureModel, SuperPoissonParams, logpmf, overlap, sample
from ..errors import ConfigError, TrainingError
from ..posterior_grid import grid_nodes, log_mixture_terms, normalize_log
from .model import (
    PREDICTED_FLOOR,
    ArchitectureSpec,
    Batch,
    NetworkWeights,
    forward_batch,
    init_weights,
    kl_from_log,
    loss_and_grad,
)

log = logging.getLogger(__name__)

CHUNK = 1000


@dataclass(frozen=True)
class TrainingRanges:
    """Task distribution. ``alpha``/``beta``/``N`` are drawn log-uniformly, ``l`` uniformly."""

    alpha: tuple = (0.2, 300.0)
    beta: tuple = (0.1, 20.0)
    N: tuple = (50, 1000)
    l: tuple = (0.0, 1.0)

    def __post_init__(self):
        for name in ("alpha", "beta", "N", "l"):
            lo, hi = getattr(self, name)
            if not (lo < hi):
                raise ConfigError(f"range must satisfy lo < hi, got {(lo, hi)}", field=name)
            object.__setattr__(self, name, (lo, hi))
        if self.alpha[0] <= 0 or self.beta[0] <= 0 or self.N[0] < 1:
            raise ConfigError("alpha, beta must be > 0 and N >= 1", field="ranges")
        if not (0.0 <= self.l[0] and self.l[1] <= 1.0):
            raise ConfigError("occupation range must lie in [0, 1]", field="l")

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


def _log_uniform(rng, lo, hi):
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def _draw_task(rng, ranges: TrainingRanges):
    while True:
        g = SuperPoissonParams(_log_uniform(rng, *ranges.alpha), _log_uniform(rng, *ranges.beta))
        f = SuperPoissonParams(_log_uniform(rng, *ranges.alpha), _log_uniform(rng, *ranges.beta))
        if f.mean > g.mean:
            break
    l = rng.uniform(*ranges.l)
    N = int(round(_log_uniform(rng, *ranges.N)))
    return g, f, l, N, int(rng.integers(2**63))


@dataclass(eq=False)
class TrainingSet:
    """Tasks stored as flat per-distinct-count rows.

    Row ``j`` of task ``b`` (``offsets[b] <= j < offsets[b+1]``) holds the
    ratio ``s[j]`` of one distinct count and its multiplicity ``mult[j]``.
    """

    s: np.ndarray
    mult: np.ndarray
    offsets: np.ndarray
    N: np.ndarray
    theta: np.ndarray  # (B, 4): alpha_g, beta_g, alpha_f, beta_f
    l: np.ndarray
    target: np.ndarray  # (B, L)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.N.size)

    @property
    def L(self) -> int:
        return int(self.target.shape[1])

    def aux_raw(self) -> np.ndarray:
        return np.log(np.column_stack([self.N, self.theta]))

    def rows(self, idx):
        idx = np.asarray(idx)
        starts, ends = self.offsets[idx], self.offsets[idx + 1]
        lengths = ends - starts
        new_starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        rows = np.repeat(starts - new_starts, lengths) + np.arange(lengths.sum())
        return rows, new_starts

    def batch(self, idx, standardization: dict) -> Batch:
        idx = np.asarray(idx)
        rows, starts = self.rows(idx)
        mult = self.mult[rows]
        n = self.N[idx].astype(np.float64)
        w = mult / np.repeat(n, np.diff(np.append(starts, rows.size)))
        aux = (self.aux_raw()[idx] - np.asarray(standardization["aux_mean"])) / np.asarray(standardization["aux_std"])
        x = (self.s[rows] - standardization["s_shift"]) / standardization["s_scale"]
        return Batch(x, w, starts.astype(np.intp), aux, n, self.target[idx])

    def overlaps(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.array(
            [
                overlap(SuperPoissonParams(*self.theta[b, 2:]), SuperPoissonParams(*self.theta[b, :2]))
                for b in idx
            ]
        )

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.s, self.mult, self.offsets, self.N, self.theta, self.l, self.target):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def generate_training_set(ranges: TrainingRanges | None = None, size: int = 1000, seed: int = 0, L: int = 201) -> TrainingSet:
    """Simulate ``size`` tasks with their exact grid posteriors (uniform prior).

    Every task draws ``(theta_g, theta_f, l, N)``, samples counts and computes
    the exact posterior under the same ``theta_f`` that is handed to the
    network as auxiliary input. Tasks are generated in fixed chunks with
    independent child seeds, so the set is a pure function of the arguments.
    """
    ranges = ranges or TrainingRanges()
    if size < 1:
        raise ConfigError("training set size must be >= 1", field="size")
    nodes = grid_nodes(L)
    n_chunks = -(-size // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    s_parts, m_parts, sizes = [], [], []
    N = np.empty(size, dtype=np.int64)
    theta = np.empty((size, 4))
    occ = np.empty(size)
    target = np.empty((size, L))
    b = 0
    for c in range(n_chunks):
        rng = np.random.default_rng(children[c])
        for _ in range(min(CHUNK, size - b)):
            g, f, l, n, task_seed = _draw_task(rng, ranges)
            counts = sample(MixtureModel(g, f, l), n, task_seed).counts
            values, mult = np.unique(counts, return_counts=True)
            lg, lf = logpmf(g, values), logpmf(f, values)
            ll = mult.astype(np.float64) @ log_mixture_terms(lg, lf, nodes)
            target[b] = normalize_log(ll)
            s_parts.append(lf - lg)
            m_parts.append(mult.astype(np.float64))
            sizes.append(values.size)
            N[b], occ[b] = n, l
            theta[b] = (g.alpha, g.beta, f.alpha, f.beta)
            b += 1
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    meta = {"ranges": ranges.to_dict(), "size": size, "seed": seed, "L": L}
    return TrainingSet(np.concatenate(s_parts), np.concatenate(m_parts), offsets, N, theta, occ, target, meta)


def fit_standardization(dataset: TrainingSet, s_scale: float = 4.0) -> dict:
    aux = dataset.aux_raw()
    std = aux.std(axis=0)
    std[std == 0] = 1.0
    return {
        "s_shift": 0.0,
        "s_scale": float(s_scale),
        "aux_mean": [float(v) for v in aux.mean(axis=0)],
        "aux_std": [float(v) for v in std],
    }


@dataclass(frozen=True)
class OptimizerConfig:
    batch_size: int = 256
    lr: float = 1e-3
    lr_min: float = 1e-5  # cosine decay floor
    epochs: int = 50
    val_fraction: float = 0.1
    patience: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1", field="optimizer")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)", field="val_fraction")
        if not (self.lr > 0 and self.lr_min > 0):
            raise ConfigError("learning rates must be positive", field="lr")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[k] -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)


def batch_kl(weights_or_params, arch: ArchitectureSpec, batch: Batch) -> np.ndarray:
    params = weights_or_params
    log_pred, _ = forward_batch(params, arch, batch)
    log_pred = np.maximum(log_pred.astype(np.float64), math.log(PREDICTED_FLOOR))
    return np.maximum(kl_from_log(batch.target.astype(np.float64), log_pred), 0.0)


def evaluate_kl(weights: NetworkWeights, dataset: TrainingSet, batch_size: int = 512, dtype="float32", idx=None) -> np.ndarray:
    """KL(exact || network) for every task (or the tasks in ``idx``)."""
    if dataset.L != weights.L:
        raise ConfigError(f"dataset grid L={dataset.L} != network grid L={weights.L}", field="L")
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    params = weights.cast(dtype)
    out = []
    for i in range(0, idx.size, batch_size):
        batch = dataset.batch(idx[i : i + batch_size], weights.standardization).astype(dtype)
        out.append(batch_kl(params, weights.architecture, batch))
    return np.concatenate(out) if out else np.zeros(0)


def train(
    dataset: TrainingSet,
    architecture: ArchitectureSpec | None = None,
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
    progress=None,
) -> NetworkWeights:
    """Minimise mean KL(exact || network) with mini-batch Adam.

    Returns the weights with the best mean validation KL. ``progress`` is an
    optional callable receiving each epoch's history record.
    """
    cfg = optimizer or OptimizerConfig()
    arch = architecture or ArchitectureSpec(head_widths=(32 + 5, 128, 128, dataset.L))
    if arch.L != dataset.L:
        raise ConfigError(f"architecture grid L={arch.L} != dataset grid L={dataset.L}", field="L")
    if len(dataset) < 2:
        raise ConfigError("training needs at least two tasks", field="dataset")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset))))
    val_idx, train_idx = np.sort(order[:n_val]), order[n_val:]
    if train_idx.size == 0:
        raise ConfigError("validation split leaves no training tasks", field="val_fraction")

    standardization = fit_standardization(dataset)
    weights = init_weights(arch, seed=seed, standardization=standardization)
    params = {k: v.astype(dtype) for k, v in weights.tensors.items()}
    adam = Adam(params, cfg)

    probe_idx = np.sort(train_idx[: min(2048, train_idx.size)])
    probe = dataset.batch(probe_idx, standardization).astype(dtype)
    val_batches = [
        dataset.batch(val_idx[i : i + 1024], standardization).astype(dtype) for i in range(0, val_idx.size, 1024)
    ]

    def val_kl(p):
        return np.concatenate([batch_kl(p, arch, vb) for vb in val_batches])

    v0 = val_kl(params)
    history = [
        {
            "epoch": 0,
            "train_loss": float(batch_kl(params, arch, probe).mean()),
            "val_kl_mean": float(v0.mean()),
            "val_kl_median": float(np.median(v0)),
            "lr": cfg.lr,
        }
    ]
    best = (history[0]["val_kl_mean"], {k: v.copy() for k, v in params.items()}, 0)
    steps_per_epoch = -(-train_idx.size // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(train_idx)
        running = 0.0
        for i in range(0, perm.size, cfg.batch_size):
            batch = dataset.batch(perm[i : i + cfg.batch_size], standardization).astype(dtype)
            loss, grads = loss_and_grad(params, arch, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}", trace=history)
            lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
            adam.step(params, grads, lr)
            running += loss * batch.scale.size
            step += 1
        vk = val_kl(params)
        record = {
            "epoch": epoch,
            "train_loss": float(batch_kl(params, arch, probe).mean()),
            "running_loss": running / perm.size,
            "val_kl_mean": float(vk.mean()),
            "val_kl_median": float(np.median(vk)),
            "lr": lr,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if not all(math.isfinite(record[k]) for k in ("train_loss", "val_kl_mean")):
            raise TrainingError(f"validation KL became non-finite at epoch {epoch}", trace=history + [record])
        history.append(record)
        log.debug("epoch %d: %s", epoch, record)
        if progress is not None:
            progress(record)
        if record["val_kl_mean"] < best[0]:
            best = (record["val_kl_mean"], {k: v.copy() for k, v in params.items()}, epoch)
        elif epoch - best[2] >= cfg.patience:
            break

    weights.set_tensors(best[1])
    weights.metadata = {
        "seed": seed,
        "epochs_run": history[-1]["epoch"],
        "best_epoch": best[2],
        "final_loss": best[0],
        "optimizer": cfg.to_dict(),
        "dataset": dict(dataset.meta),
        "history": [{k: v for k, v in h.items() if k != "seconds"} for h in history],
    }
    return weights


def evaluate_em_agreement(weights: NetworkWeights, ranges: TrainingRanges | None = None, n_tasks: int = 200, seed: int = 0, em_config=None) -> dict:
    """Run weakly anchored EM with both engines on fresh simulated tasks.

    A task agrees when ``|lbar_network - lbar_exact| <= 2 * sd_exact``.
    Returns the per-task arrays and the agreement fraction.
    """
    from dataclasses import replace

    from ..bayes_em import EmConfig, run_em

    ranges = ranges or TrainingRanges()
    cfg = em_config or EmConfig()
    exact_cfg = replace(cfg, e_step_engine="exact", network=None)
    net_cfg = replace(cfg, e_step_engine="network", network=weights)
    rows = []
    for child in np.random.SeedSequence(seed).spawn(n_tasks):
        rng = np.random.default_rng(child)
        g, f, l, N, s = _draw_task(rng, ranges)
        rec = sample(MixtureModel(g, f, l), N, s)
        pe, _, _ = run_em(rec, g, None, exact_cfg)
        pn, _, _ = run_em(rec, g, None, net_cfg)
        rows.append((l, pe.mean, pe.sd, pn.mean))
    arr = np.array(rows).reshape(-1, 4)
    agree = np.abs(arr[:, 3] - arr[:, 1]) <= 2.0 * arr[:, 2]
    return {
        "l_true": arr[:, 0],
        "exact_mean": arr[:, 1],
        "exact_sd": arr[:, 2],
        "network_mean": arr[:, 3],
        "agree": agree,
        "fraction": float(agree.mean()) if agree.size else float("nan"),
    }
