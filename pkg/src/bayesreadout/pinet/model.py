"""Permutation-invariant posterior network.

Each shot enters through its log-likelihood ratio ``s_i = log f(n_i) - log g(n_i)``.
The encoder ``phi`` maps every ``s_i`` to a feature vector; features are
mean-pooled, concatenated with the standardised auxiliary inputs
``(log N, log alpha_g, log beta_g, log alpha_f, log beta_f)`` and passed
through the head ``pi``, which emits one logit per grid node. A softmax
turns the logits into posterior masses on ``linspace(0, 1, L)``.

Two structural choices tie the head to the form of the exact posterior,
whose log is ``N * mean_i psi(s_i, l)``:

* the head output is multiplied by ``N`` before the softmax
  (``logit_scale="n"``), so evidence sharpens the posterior as it should;
* a linear skip path adds ``pooled @ W_skip`` to the head output, so
  a posterior that is linear in the pooled features needs no hidden layer.

Forward and backward passes are written out by hand for batches of tasks
given as flat rows with per-task segment boundaries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from ..count_model import ShotRecord, SuperPoissonParams, as_counts, logpmf
from ..errors import ArchitectureError, ParameterDomainError
from ..posterior_grid import PosteriorGrid, grid_nodes

ACTIVATIONS = ("tanh", "softplus")
AUX_DIM = 5
PREDICTED_FLOOR = 1e-12
#: rows per encoder block at inference
INFER_BLOCK = 1024


@dataclass(frozen=True)
class ArchitectureSpec:
    encoder_widths: tuple = (1, 32, 32)
    head_widths: tuple = (32 + AUX_DIM, 128, 128, 201)
    activation: str = "tanh"
    pooling: str = "mean"
    logit_scale: str = "n"
    skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        enc, head = self.encoder_widths, self.head_widths
        if len(enc) < 2 or len(head) < 2:
            raise ArchitectureError("encoder and head need at least one layer each")
        if any(w < 1 for w in enc + head):
            raise ArchitectureError("all layer widths must be >= 1")
        if enc[0] != 1:
            raise ArchitectureError("encoder input width must be 1 (one ratio per shot)")
        if head[0] != enc[-1] + AUX_DIM:
            raise ArchitectureError(f"head input width {head[0]} != pooled {enc[-1]} + aux {AUX_DIM}")
        if head[-1] < 2:
            raise ArchitectureError("head output (grid size) must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ArchitectureError(f"unknown activation {self.activation!r}")
        if self.pooling != "mean":
            raise ArchitectureError("only mean pooling is supported")
        if self.logit_scale not in ("n", "none"):
            raise ArchitectureError(f"unknown logit scale {self.logit_scale!r}")

    @property
    def L(self) -> int:
        return self.head_widths[-1]

    def tensor_shapes(self) -> dict:
        shapes = {}
        enc, head = self.encoder_widths, self.head_widths
        for i in range(len(enc) - 1):
            shapes[f"enc.{i}.W"] = (enc[i], enc[i + 1])
            shapes[f"enc.{i}.b"] = (enc[i + 1],)
        for i in range(len(head) - 1):
            shapes[f"head.{i}.W"] = (head[i], head[i + 1])
            shapes[f"head.{i}.b"] = (head[i + 1],)
        if self.skip:
            shapes["skip.W"] = (enc[-1], head[-1])
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ArchitectureError(f"bad architecture descriptor: {exc}") from None


def default_standardization() -> dict:
    return {
        "s_shift": 0.0,
        "s_scale": 4.0,
        "aux_mean": [0.0] * AUX_DIM,
        "aux_std": [1.0] * AUX_DIM,
    }


@dataclass(eq=False)
class NetworkWeights:
    architecture: ArchitectureSpec
    tensors: dict
    standardization: dict = field(default_factory=default_standardization)
    metadata: dict = field(default_factory=dict)
    _cast: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        shapes = self.architecture.tensor_shapes()
        if list(self.tensors) != list(shapes):
            raise ArchitectureError(f"tensor names {list(self.tensors)} do not match architecture {list(shapes)}")
        for name, shape in shapes.items():
            t = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ArchitectureError(f"{name}: shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise ArchitectureError(f"{name}: non-finite entries")
            self.tensors[name] = t
        std = self.standardization
        if len(std["aux_mean"]) != AUX_DIM or len(std["aux_std"]) != AUX_DIM:
            raise ArchitectureError("aux standardisation must have 5 entries")
        if std["s_scale"] <= 0 or min(std["aux_std"]) <= 0:
            raise ArchitectureError("standardisation scales must be positive")

    @property
    def L(self) -> int:
        return self.architecture.L

    def cast(self, dtype) -> dict:
        """Tensors converted to ``dtype`` (cached; invalidated by :meth:`set_tensors`)."""
        key = np.dtype(dtype).str
        if key not in self._cast:
            self._cast[key] = {k: v.astype(dtype) for k, v in self.tensors.items()}
        return self._cast[key]

    def first_layer(self, dtype) -> np.ndarray:
        """``[W; b]`` of the first encoder layer, as used by :func:`_infer_one` (cached)."""
        key = "first:" + np.dtype(dtype).str
        if key not in self._cast:
            p = self.cast(dtype)
            self._cast[key] = np.vstack([p["enc.0.W"], p["enc.0.b"]])
        return self._cast[key]

    def set_tensors(self, tensors: dict):
        self.tensors = {k: np.ascontiguousarray(tensors[k], dtype=np.float64) for k in self.tensors}
        self._cast.clear()

    def allclose(self, other: "NetworkWeights") -> bool:
        return self.architecture == other.architecture and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_weights(architecture: ArchitectureSpec | None = None, seed: int = 0, standardization=None) -> NetworkWeights:
    """Random initial weights; the head's output layer and the skip path start at zero."""
    arch = architecture or ArchitectureSpec()
    rng = np.random.default_rng(seed)
    tensors = {}
    last = len(arch.head_widths) - 2
    for name, shape in arch.tensor_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        elif name == f"head.{last}.W" or name == "skip.W":
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    if arch.encoder_widths[1] > 1:
        # spread first-layer transitions over the informative ratio range
        tensors["enc.0.b"] = np.linspace(-2.0, 2.0, arch.encoder_widths[1])
    return NetworkWeights(arch, tensors, standardization or default_standardization())


@dataclass(frozen=True)
class AuxFeatures:
    N: int
    g: SuperPoissonParams
    f: SuperPoissonParams

    def raw(self) -> np.ndarray:
        if self.N < 1:
            raise ParameterDomainError("sample size must be >= 1")
        return np.log([self.N, self.g.alpha, self.g.beta, self.f.alpha, self.f.beta])


def standardize_aux(raw, standardization: dict) -> np.ndarray:
    return (np.asarray(raw, dtype=np.float64) - np.asarray(standardization["aux_mean"])) / np.asarray(
        standardization["aux_std"]
    )


def encode_shots(counts, g: SuperPoissonParams, f: SuperPoissonParams) -> np.ndarray:
    """Log-likelihood ratios ``log f(n_i) - log g(n_i)``, one per shot, in input order."""
    n = as_counts(counts)
    return logpmf(f, n) - logpmf(g, n)


# -- activations ---------------------------------------------------------------


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    return np.logaddexp(0.0, x)


def _act_grad(name, x, y):
    """Derivative at pre-activation ``x`` given output ``y``."""
    if name == "tanh":
        return 1.0 - y * y
    return 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic sigmoid


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- batched forward / backward ------------------------------------------------


@dataclass
class Batch:
    """Flat rows of several tasks.

    ``x``: standardised ratios (M,); ``w``: pooling weight of each row, summing
    to one within a task (M,); ``starts``: first row of each task (B,);
    ``aux``: standardised auxiliary features (B, 5); ``scale``: logit scale per
    task (B,); ``target``: optional target masses (B, L).
    """

    x: np.ndarray
    w: np.ndarray
    starts: np.ndarray
    aux: np.ndarray
    scale: np.ndarray
    target: np.ndarray | None = None

    def astype(self, dtype) -> "Batch":
        t = None if self.target is None else self.target.astype(dtype)
        return Batch(
            self.x.astype(dtype),
            self.w.astype(dtype),
            self.starts,
            self.aux.astype(dtype),
            self.scale.astype(dtype),
            t,
        )


def _segment_ids(starts, M):
    sizes = np.diff(np.append(starts, M))
    return np.repeat(np.arange(starts.size), sizes)


def forward_batch(params: dict, arch: ArchitectureSpec, batch: Batch):
    """Log posterior masses (B, L) and the cache needed by :func:`backward_batch`."""
    act = arch.activation
    cache = {"enc_in": [], "enc_pre": [], "enc_out": [], "head_in": [], "head_pre": [], "head_out": []}
    h = batch.x[:, None]
    n_enc = len(arch.encoder_widths) - 1
    for i in range(n_enc):
        cache["enc_in"].append(h)
        pre = h @ params[f"enc.{i}.W"] + params[f"enc.{i}.b"]
        h = _act(act, pre)
        cache["enc_pre"].append(pre)
        cache["enc_out"].append(h)
    pooled = np.add.reduceat(h * batch.w[:, None], batch.starts, axis=0)
    cache["pooled"] = pooled
    a = np.concatenate([pooled, batch.aux], axis=1)
    n_head = len(arch.head_widths) - 1
    for i in range(n_head):
        cache["head_in"].append(a)
        pre = a @ params[f"head.{i}.W"] + params[f"head.{i}.b"]
        if i < n_head - 1:
            a = _act(act, pre)
            cache["head_pre"].append(pre)
            cache["head_out"].append(a)
        else:
            a = pre
    u = a
    if arch.skip:
        u = u + pooled @ params["skip.W"]
    logits = u * batch.scale[:, None] if arch.logit_scale == "n" else u
    return _log_softmax(logits), cache


def _infer_one(params: dict, arch: ArchitectureSpec, batch: Batch, w0=None):
    """Cache-free :func:`forward_batch` for a single task (inference only)."""
    return _log_softmax(_infer_logits(params, arch, batch, w0))


def _infer_logits(params: dict, arch: ArchitectureSpec, batch: Batch, w0=None):
    # first layer as an (n, 2) @ (2, width) product with the bias folded in;
    # much faster than a broadcast outer product plus add
    if w0 is None:
        w0 = np.vstack([params["enc.0.W"], params["enc.0.b"]])
    pooled = np.zeros(arch.encoder_widths[-1], dtype=batch.x.dtype)
    # fixed-size row blocks bound the temporaries; 1024 rows timed best here
    for lo in range(0, batch.x.size, INFER_BLOCK):
        x = batch.x[lo : lo + INFER_BLOCK]
        x1 = np.ones((x.size, 2), dtype=x.dtype)
        x1[:, 0] = x
        h = x1 @ w0
        for i in range(len(arch.encoder_widths) - 1):
            if i:
                h = h @ params[f"enc.{i}.W"]
                h += params[f"enc.{i}.b"]
            h = np.tanh(h, out=h) if arch.activation == "tanh" else _act(arch.activation, h)
        pooled += batch.w[lo : lo + INFER_BLOCK] @ h
    a = np.concatenate([pooled, batch.aux[0]])
    n_head = len(arch.head_widths) - 1
    for i in range(n_head):
        a = a @ params[f"head.{i}.W"]
        a += params[f"head.{i}.b"]
        if i < n_head - 1:
            a = _act(arch.activation, a)
    if arch.skip:
        a += pooled @ params["skip.W"]
    if arch.logit_scale == "n":
        a *= batch.scale[0]
    return a


def kl_from_log(target, log_pred):
    """Row-wise ``sum_k t_k (log t_k - log p_k)`` with ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(target > 0, target * (np.log(np.where(target > 0, target, 1.0)) - log_pred), 0.0)
    return terms.sum(axis=-1)


def backward_batch(params: dict, arch: ArchitectureSpec, batch: Batch, log_pred, cache) -> dict:
    """Gradients of the batch-mean KL(target || predicted) with respect to every tensor."""
    act = arch.activation
    B = log_pred.shape[0]
    grads = {}
    d_logits = (np.exp(log_pred) - batch.target) / B
    du = d_logits * batch.scale[:, None] if arch.logit_scale == "n" else d_logits
    pooled = cache["pooled"]
    d_pooled = np.zeros_like(pooled)
    if arch.skip:
        grads["skip.W"] = pooled.T @ du
        d_pooled += du @ params["skip.W"].T
    n_head = len(arch.head_widths) - 1
    da = du
    for i in reversed(range(n_head)):
        if i < n_head - 1:
            da = da * _act_grad(act, cache["head_pre"][i], cache["head_out"][i])
        a_in = cache["head_in"][i]
        grads[f"head.{i}.W"] = a_in.T @ da
        grads[f"head.{i}.b"] = da.sum(axis=0)
        da = da @ params[f"head.{i}.W"].T
    d_pooled += da[:, : pooled.shape[1]]
    M = batch.x.shape[0]
    seg = _segment_ids(batch.starts, M)
    dh = d_pooled[seg] * batch.w[:, None]
    n_enc = len(arch.encoder_widths) - 1
    for i in reversed(range(n_enc)):
        dh = dh * _act_grad(act, cache["enc_pre"][i], cache["enc_out"][i])
        grads[f"enc.{i}.W"] = cache["enc_in"][i].T @ dh
        grads[f"enc.{i}.b"] = dh.sum(axis=0)
        if i > 0:
            dh = dh @ params[f"enc.{i}.W"].T
    return {k: grads[k] for k in params}


def loss_and_grad(params: dict, arch: ArchitectureSpec, batch: Batch):
    log_pred, cache = forward_batch(params, arch, batch)
    loss = float(np.mean(kl_from_log(batch.target, log_pred)))
    return loss, backward_batch(params, arch, batch, log_pred, cache)


# -- single-task inference -----------------------------------------------------


def make_batch(tasks, standardization: dict, target=None) -> Batch:
    """Stack tasks given as ``(s, multiplicity or None, aux_raw)`` tuples.

    Rows of a task without multiplicities are sorted so that pooling runs in
    a fixed order whatever the order of the shots.
    """
    xs, ws, starts, auxs, scales = [], [], [], [], []
    row = 0
    shift, scale = standardization["s_shift"], standardization["s_scale"]
    for s, mult, aux_raw in tasks:
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise ParameterDomainError("a task needs at least one shot")
        if np.any(~np.isfinite(s)):
            raise ParameterDomainError("log-likelihood ratios must be finite")
        if mult is None:
            s = np.sort(s)
            mult = np.ones(s.size)
        else:
            mult = np.asarray(mult, dtype=np.float64)
            if mult.shape != s.shape or np.any(mult <= 0):
                raise ParameterDomainError("multiplicities must be positive and match the ratios")
        n = mult.sum()
        xs.append((s - shift) / scale)
        ws.append(mult / n)
        starts.append(row)
        row += s.size
        auxs.append(standardize_aux(aux_raw, standardization))
        scales.append(n)
    return Batch(
        np.concatenate(xs),
        np.concatenate(ws),
        np.asarray(starts, dtype=np.intp),
        np.vstack(auxs),
        np.asarray(scales, dtype=np.float64),
        target,
    )


def forward(weights: NetworkWeights, s, aux: AuxFeatures, multiplicity=None, dtype=np.float32) -> PosteriorGrid:
    """Network posterior for one task.

    ``s`` holds one ratio per shot, or one per distinct count when
    ``multiplicity`` gives how often each occurs (the pooled mean, and hence
    the output, is the same either way up to rounding).
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if multiplicity is None and aux.N != s.size:
        raise ArchitectureError(f"aux N={aux.N} but {s.size} ratios were given")
    batch = _single_batch(s, multiplicity, aux.raw(), weights.standardization, dtype)
    # softmax straight to float64 masses
    masses = _infer_logits(weights.cast(dtype), weights.architecture, batch, weights.first_layer(dtype)).astype(np.float64)
    masses -= masses.max()
    np.exp(masses, out=masses)
    masses /= masses.sum()
    return PosteriorGrid.from_masses(_nodes(weights.L), masses)


def _single_batch(s, mult, aux_raw, standardization: dict, dtype) -> Batch:
    """:func:`make_batch` for one task, cast to ``dtype``; same values, less overhead."""
    if s.size == 0:
        raise ParameterDomainError("a task needs at least one shot")
    if not np.isfinite(s).all():
        raise ParameterDomainError("log-likelihood ratios must be finite")
    if mult is None:
        s = np.sort(s)
        n = float(s.size)
        w = np.full(s.size, 1.0 / n)
    else:
        mult = np.asarray(mult, dtype=np.float64)
        if mult.shape != s.shape or not (mult > 0).all():
            raise ParameterDomainError("multiplicities must be positive and match the ratios")
        n = mult.sum()
        w = mult / n
    x = (s - standardization["s_shift"]) / standardization["s_scale"]
    aux = standardize_aux(aux_raw, standardization)[None, :]
    return Batch(
        x.astype(dtype),
        w.astype(dtype),
        np.zeros(1, dtype=np.intp),
        aux.astype(dtype),
        np.array([n], dtype=dtype),
    )


@lru_cache(maxsize=8)
def _nodes(L: int) -> np.ndarray:
    nodes = grid_nodes(L)
    nodes.setflags(write=False)
    return nodes


def forward_counts(weights: NetworkWeights, counts, g: SuperPoissonParams, f: SuperPoissonParams, **kw) -> PosteriorGrid:
    if not isinstance(counts, ShotRecord):
        counts = ShotRecord(counts)
    values, mult = counts.histogram()
    s = logpmf(f, values) - logpmf(g, values)
    return forward(weights, s, AuxFeatures(counts.N, g, f), multiplicity=mult.astype(np.float64), **kw)


def kl_loss(target: PosteriorGrid, predicted: PosteriorGrid) -> float:
    """KL(target || predicted) on a shared grid; predicted masses are floored at 1e-12."""
    t = np.asarray(target.masses, dtype=np.float64)
    p = np.asarray(predicted.masses, dtype=np.float64)
    if t.shape != p.shape or not np.allclose(np.asarray(target.nodes), np.asarray(predicted.nodes), atol=1e-12):
        raise ParameterDomainError("posteriors live on different grids")
    p = np.maximum(p, PREDICTED_FLOOR)
    mask = t > 0
    return max(float(np.sum(t[mask] * (np.log(t[mask]) - np.log(p[mask])))), 0.0)
