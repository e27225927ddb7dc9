"""Synthetic Rabi and Ramsey scans, curve fits, and readout-method comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .bayes_em import EmConfig, run_em, run_em_joint
from .count_model import MixtureModel, ShotRecord, SuperPoissonParams, sample
from .errors import CalibrationRequiredError, ConfigError, FitDegenerateError, ParameterDomainError
from .posterior_grid import PriorSpec
from .threshold import ThresholdSpec, choose_threshold, estimate_threshold

TWO_PI = 2.0 * math.pi
#: Paper's Rabi sampling times (seconds).
RABI_TIMES = tuple(t * 1e-6 for t in (0, 7, 14, 21, 28, 35, 42))
METHODS = ("threshold", "em_exact", "em_network")


def fidelity(l_ref: float, l_est: float) -> float:
    """Overlap ``[sqrt(a b) + sqrt((1-a)(1-b))]^2`` of two equal-phase qubit states."""
    for v in (l_ref, l_est):
        if not (0.0 <= v <= 1.0):
            raise ParameterDomainError(f"occupation {v!r} outside [0, 1]")
    root = math.sqrt(l_ref * l_est) + math.sqrt((1.0 - l_ref) * (1.0 - l_est))
    return min(root * root, 1.0)


@dataclass(frozen=True)
class RabiModel:
    omega: float  # rad/s
    amplitude: float
    residual_norm: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.omega > 0 and math.isfinite(self.omega)):
            raise ParameterDomainError(f"Rabi frequency must be positive, got {self.omega!r}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ParameterDomainError(f"Rabi amplitude must lie in [0, 1], got {self.amplitude!r}")

    @classmethod
    def from_frequency(cls, frequency_hz: float, amplitude: float) -> "RabiModel":
        return cls(TWO_PI * frequency_hz, amplitude)

    @property
    def frequency_hz(self) -> float:
        return self.omega / TWO_PI

    def occupation(self, t):
        return self.amplitude * np.sin(0.5 * self.omega * np.asarray(t, dtype=np.float64)) ** 2


@dataclass(frozen=True)
class RamseyModel:
    """``l(t) = amp * exp(-t^2 / 2 sigma^2) * cos(delta_omega t + phi) + l0``.

    ``T2`` is the 1/e time of the Gaussian envelope, ``sigma * sqrt(2)``.
    """

    sigma: float
    delta_omega: float
    phi: float
    l0: float
    amp: float
    residual_norm: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterDomainError(f"sigma must be positive, got {self.sigma!r}")
        if self.amp < 0:
            raise ParameterDomainError("amplitude must be non-negative (absorb the sign into phi)")

    @classmethod
    def from_t2(cls, t2: float, detuning_hz: float, phi: float = 0.0, l0: float = 0.5, amp: float = 0.4) -> "RamseyModel":
        return cls(t2 / math.sqrt(2.0), TWO_PI * detuning_hz, phi, l0, amp)

    @property
    def t2(self) -> float:
        return self.sigma * math.sqrt(2.0)

    @property
    def detuning_hz(self) -> float:
        return self.delta_omega / TWO_PI

    def occupation(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.amp * np.exp(-(t**2) / (2.0 * self.sigma**2)) * np.cos(self.delta_omega * t + self.phi) + self.l0


# -- data generation -----------------------------------------------------------


@dataclass
class ShotSeries:
    """Shot records of one scan, one record per time point."""

    times: np.ndarray
    records: list
    l_true: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.records) != self.times.size:
            raise ParameterDomainError("one record per time point required")
        if np.any(np.diff(self.times) <= 0):
            raise ParameterDomainError("time points must be strictly increasing")


def point_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1, np.uint64)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def generate_experiment(
    model,
    times: Sequence[float],
    N: int,
    g: SuperPoissonParams,
    f: SuperPoissonParams,
    seed: int,
    roi_id: str = "roi0",
    exposure_tag: str = "",
) -> ShotSeries:
    times = np.asarray(times, dtype=np.float64)
    l_true = np.asarray(model.occupation(times), dtype=np.float64)
    if np.any(l_true < -1e-12) or np.any(l_true > 1 + 1e-12):
        raise ParameterDomainError("model occupation leaves [0, 1] on the requested times")
    l_true = np.clip(l_true, 0.0, 1.0)
    records = [
        sample(MixtureModel(g, f, float(l)), N, s, roi_id=roi_id, exposure_tag=exposure_tag)
        for l, s in zip(l_true, point_seeds(seed, times.size))
    ]
    return ShotSeries(times, records, l_true)


# -- fitting -------------------------------------------------------------------


def _prepare(times, values, weights, min_points):
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1:
        raise ParameterDomainError("times and values must be 1-d and of equal length")
    if t.size < min_points:
        raise FitDegenerateError(f"need at least {min_points} points, got {t.size}")
    if np.ptp(y) == 0.0:
        raise FitDegenerateError("all values are equal; the oscillation is not identifiable")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ParameterDomainError("weights must be finite, non-negative and not all zero")
    return t, y, np.sqrt(w)


def _nyquist_cap(t, upper_hz):
    """Cap a frequency scan at the Nyquist limit of the finest time step."""
    dt = np.diff(np.sort(t))
    dt = dt[dt > 0]
    return upper_hz if dt.size == 0 else min(upper_hz, 0.5 / dt.min())


def fit_rabi(times, values, weights=None, frequency_bounds_hz=(1e3, 100e3), n_scan: int = 4000) -> RabiModel:
    """Weighted least squares for ``A sin^2(Omega t / 2)``.

    A dense frequency scan (amplitude solved in closed form at each
    frequency) picks the basin; a bounded trust-region refinement finishes.
    """
    t, y, sw = _prepare(times, values, weights, 3)
    f_lo, f_hi = frequency_bounds_hz[0], _nyquist_cap(t, frequency_bounds_hz[1])
    if f_hi <= f_lo:
        raise FitDegenerateError("sampling too coarse for the requested frequency range")
    omegas = TWO_PI * np.linspace(f_lo, f_hi, n_scan)
    x = np.sin(0.5 * np.outer(omegas, t)) ** 2 * sw
    yw = y * sw
    denom = np.einsum("ij,ij->i", x, x)
    amp = np.clip(np.divide(x @ yw, denom, out=np.zeros_like(denom), where=denom > 0), 0.0, 1.0)
    cost = np.sum((x * amp[:, None] - yw) ** 2, axis=1)
    k = int(np.argmin(cost))
    scale = omegas[k]

    def resid(p):
        return (p[1] * np.sin(0.5 * p[0] * scale * t) ** 2 - y) * sw

    # the amplitude is left free here: a bound at A = 1 would stall the
    # refinement just inside it when the truth sits on the bound
    lo = np.array([omegas[0] / scale, -np.inf])
    hi = np.array([omegas[-1] / scale, np.inf])
    p0 = np.array([min(max(1.0, lo[0] + 1e-12), hi[0] - 1e-12), amp[k]])
    sol = least_squares(resid, p0, bounds=(lo, hi), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    w, a = sol.x
    if not 0.0 <= a <= 1.0:
        a = float(np.clip(a, 0.0, 1.0))
        sol = least_squares(
            lambda q: resid([q[0], a]), [w], bounds=(lo[:1], hi[:1]), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15
        )
        w = sol.x[0]
    return RabiModel(w * scale, float(a), float(np.linalg.norm(sol.fun)))


def _wrap(phi):
    return (phi + math.pi) % TWO_PI - math.pi


def fit_ramsey(
    times,
    values,
    weights=None,
    detuning_bounds_hz=(50.0, 5e3),
    n_scan: int = 2000,
    n_sigma: int = 40,
) -> RamseyModel:
    """Least squares for the Gaussian-damped fringe.

    For fixed ``(sigma, delta_omega)`` the model is linear in
    ``(amp cos phi, amp sin phi, l0)``; the scan solves that linear problem on
    a grid, and the best grid point seeds a full nonlinear refinement.
    """
    t, y, sw = _prepare(times, values, weights, 6)
    span = float(t.max() - t.min()) or float(t.max())
    f_lo, f_hi = detuning_bounds_hz[0], _nyquist_cap(t, detuning_bounds_hz[1])
    if f_hi <= f_lo:
        raise FitDegenerateError("sampling too coarse for the requested detuning range")
    omegas = TWO_PI * np.linspace(f_lo, f_hi, n_scan)
    sigmas = np.geomspace(span / 20.0, span * 10.0, n_sigma)
    env = np.exp(-(t**2)[None, :] / (2.0 * sigmas[:, None] ** 2))  # (S, T)
    c = np.cos(np.outer(omegas, t))  # (W, T)
    s = np.sin(np.outer(omegas, t))
    yw = y * sw
    best = (np.inf, None)
    for i, e in enumerate(env):
        basis = np.stack([e * c, -e * s, np.broadcast_to(np.ones_like(t), c.shape)], axis=-1) * sw[None, :, None]
        gram = np.einsum("wti,wtj->wij", basis, basis)
        rhs = np.einsum("wti,t->wi", basis, yw)
        gram += 1e-12 * np.eye(3)
        coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
        cost = np.sum((np.einsum("wti,wi->wt", basis, coef) - yw) ** 2, axis=1)
        j = int(np.argmin(cost))
        if cost[j] < best[0]:
            best = (cost[j], (sigmas[i], omegas[j], coef[j]))
    sigma0, omega0, (cc, dd, l00) = best[1]
    p0 = np.array([sigma0, omega0, math.atan2(dd, cc), l00, math.hypot(cc, dd)])
    scale = np.array([sigma0, omega0, 1.0, 1.0, 1.0])

    def resid(q):
        sg, om, ph, l0, a = q * scale
        return (a * np.exp(-(t**2) / (2.0 * sg**2)) * np.cos(om * t + ph) + l0 - y) * sw

    lo = np.array([1e-9 / sigma0, omegas[0] / omega0, -np.inf, -np.inf, 0.0])
    hi = np.array([np.inf, omegas[-1] / omega0, np.inf, np.inf, np.inf])
    q0 = np.clip(p0 / scale, lo, hi)
    sol = least_squares(resid, q0, bounds=(lo, hi), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
    sg, om, ph, l0, a = sol.x * scale
    return RamseyModel(float(sg), float(om), float(_wrap(ph)), float(l0), float(a), float(np.linalg.norm(sol.fun)))


# -- method comparison ---------------------------------------------------------


@dataclass
class ExperimentResult:
    method: str
    times: np.ndarray
    estimates: np.ndarray
    sds: np.ndarray | None
    reference: np.ndarray | None
    fidelities: np.ndarray | None
    fit: object | None
    theta_f: SuperPoissonParams | None = None
    em: dict | None = None
    fit_error: str | None = None

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ParameterDomainError("time points must be strictly increasing")

    @property
    def mean_fidelity(self) -> float:
        return float(np.mean(self.fidelities))

    def rows(self) -> list[dict]:
        out = []
        for k, t in enumerate(self.times):
            out.append(
                {
                    "method": self.method,
                    "t": float(t),
                    "estimate": float(self.estimates[k]),
                    "sd": None if self.sds is None else float(self.sds[k]),
                    "reference": None if self.reference is None else float(self.reference[k]),
                    "fidelity": None if self.fidelities is None else float(self.fidelities[k]),
                }
            )
        return out

    def fit_summary(self) -> dict | None:
        if self.fit is None:
            return None
        if isinstance(self.fit, RabiModel):
            return {
                "kind": "rabi",
                "frequency_hz": self.fit.frequency_hz,
                "amplitude": self.fit.amplitude,
                "residual_norm": self.fit.residual_norm,
            }
        return {
            "kind": "ramsey",
            "t2_s": self.fit.t2,
            "sigma_s": self.fit.sigma,
            "detuning_hz": self.fit.detuning_hz,
            "phi": self.fit.phi,
            "l0": self.fit.l0,
            "amp": self.fit.amp,
            "residual_norm": self.fit.residual_norm,
        }


def _fit(kind, times, est, sds):
    weights = None
    if sds is not None and np.all(np.asarray(sds) > 0):
        weights = 1.0 / np.asarray(sds) ** 2
    fitter = fit_rabi if kind == "rabi" else fit_ramsey
    try:
        return fitter(times, est, weights), None
    except FitDegenerateError as exc:
        return None, str(exc)


def infer_series(series: ShotSeries, g, config: EmConfig | None = None, prior=None, share_bright: bool = True):
    """EM estimates for every time point.

    With ``share_bright`` the bright law is common to all points (they share
    an exposure); otherwise each point runs its own EM.
    """
    config = config or EmConfig()
    if share_bright:
        posts, theta, trace = run_em_joint(series.records, g, prior, config)
        return posts, theta, trace.summary()
    posts, summaries = [], []
    theta = None
    for rec in series.records:
        post, theta, trace = run_em(rec, g, prior, config)
        posts.append(post)
        summaries.append(trace.summary())
    return posts, theta, {"per_point": summaries}


def compare_methods(
    series: ShotSeries,
    g: SuperPoissonParams,
    config: EmConfig | None = None,
    *,
    kind: str = "rabi",
    methods: Sequence[str] = METHODS,
    network=None,
    bright_calibration: SuperPoissonParams | None = None,
    threshold: ThresholdSpec | int | None = None,
    reference=None,
    prior: PriorSpec | None = None,
    share_bright: bool = True,
) -> dict:
    """Run the requested readout methods on the same shots.

    Fidelities are computed against ``reference`` (e.g. long-exposure
    threshold occupations) or, if absent, against the series' true
    occupations. The threshold method needs either an explicit threshold or
    a calibrated bright law to choose one.
    """
    if kind not in ("rabi", "ramsey"):
        raise ConfigError(f"unknown experiment kind {kind!r}", field="kind")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", field="methods")
    config = config or EmConfig()
    ref = series.l_true if reference is None else np.asarray(reference, dtype=np.float64)
    results = {}

    def finish(method, est, sds, theta=None, em=None):
        fids = None if ref is None else np.array([fidelity(float(r), float(e)) for r, e in zip(ref, est)])
        fit, err = _fit(kind, series.times, est, sds)
        results[method] = ExperimentResult(method, series.times, est, sds, ref, fids, fit, theta, em, err)

    if "threshold" in methods:
        if threshold is None:
            if bright_calibration is None:
                raise CalibrationRequiredError("threshold method needs a threshold or a calibrated bright law")
            threshold = choose_threshold(g, bright_calibration)
        est = np.array([estimate_threshold(r, threshold) for r in series.records])
        finish("threshold", est, None)
    if "em_exact" in methods:
        posts, theta, em = infer_series(series, g, replace(config, e_step_engine="exact"), prior, share_bright)
        finish("em_exact", np.array([p.mean for p in posts]), np.array([p.sd for p in posts]), theta, em)
    if "em_network" in methods:
        weights = network if network is not None else config.network
        if weights is None:
            raise ConfigError("network method requested but no trained weights were supplied", field="weights")
        cfg = replace(config, e_step_engine="network", network=weights)
        posts, theta, em = infer_series(series, g, cfg, prior, share_bright)
        finish("em_network", np.array([p.mean for p in posts]), np.array([p.sd for p in posts]), theta, em)
    return results
