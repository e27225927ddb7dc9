"""Wall-clock comparison of the exact and network E-step engines inside EM.

Each task runs a fixed number of EM iterations. The clock covers only the EM
loop (E-step engine plus M-step), never file I/O or weight loading. Warmup
runs are discarded and the median over repeats is reported.

The headline columns evaluate the likelihood once per shot, which is the
work whose cost grows with ``N``. Collapsing duplicate counts first makes
both engines nearly independent of ``N`` at these count ranges; those
timings are reported as extra columns.
"""

from __future__ import annotations

import csv
import io
import json
import gc
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import scipy

from .bayes_em import EmConfig, run_em
from .count_model import MixtureModel, SuperPoissonParams, sample
from .errors import ConfigError
from .fixtures import BRIGHT_O61, DARK_O61

DEFAULT_NS = (100, 200, 500, 1000, 2000, 5000)
#: large-N speedup quoted for the original GPU/CPU comparison; context only
REFERENCE_SPEEDUP = 100.56
_TINY_TOL = 1e-300


@dataclass
class BenchmarkRow:
    N: int
    exact_s: float
    network_s: float
    exact_collapsed_s: float | None = None
    network_collapsed_s: float | None = None
    exact_iterations: int = 0
    network_iterations: int = 0

    @property
    def speedup(self) -> float:
        return self.exact_s / self.network_s


@dataclass
class BenchmarkReport:
    rows: list
    iterations: int
    repeats: int
    warmup: int
    environment: dict = field(default_factory=dict)

    def linear_r2(self, column: str = "exact_s") -> float:
        return linear_r2([r.N for r in self.rows], [getattr(r, column) for r in self.rows])

    def to_dict(self) -> dict:
        big = max(self.rows, key=lambda r: r.N)
        return {
            "iterations": self.iterations,
            "repeats": self.repeats,
            "warmup": self.warmup,
            "environment": self.environment,
            "rows": [row_dict(r) for r in self.rows],
            "r2_exact": self.linear_r2("exact_s"),
            "r2_network": self.linear_r2("network_s"),
            "speedup_at_largest_N": big.speedup,
            "largest_N": big.N,
            "reference_speedup": REFERENCE_SPEEDUP,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        cols = list(row_dict(self.rows[0]))
        w = csv.DictWriter(out, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(row_dict(r))
        return out.getvalue()


def row_dict(r: BenchmarkRow) -> dict:
    return {
        "N": r.N,
        "exact_s": r.exact_s,
        "network_s": r.network_s,
        "speedup": r.speedup,
        "exact_collapsed_s": r.exact_collapsed_s,
        "network_collapsed_s": r.network_collapsed_s,
        "exact_iterations": r.exact_iterations,
        "network_iterations": r.network_iterations,
    }


def linear_r2(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
    }


def time_em(record, g, config: EmConfig, repeats: int, warmup: int):
    """Median wall time of ``run_em`` and the iteration count it used."""
    for _ in range(warmup):
        run_em(record, g, None, config)
    times, used = [], 0
    for _ in range(repeats):
        dt, used = _time_once(record, g, config)
        times.append(dt)
    return float(np.median(times)), used


def _time_once(record, g, config: EmConfig):
    # like timeit, keep collector pauses out of the measurement
    enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        _, _, trace = run_em(record, g, None, config)
        dt = time.perf_counter() - t0
    finally:
        if enabled:
            gc.enable()
    return dt, trace.iterations_used


def run_benchmark(
    weights,
    Ns=DEFAULT_NS,
    iterations: int = 10,
    repeats: int = 5,
    warmup: int = 1,
    seed: int = 0,
    g: SuperPoissonParams = DARK_O61,
    f: SuperPoissonParams = BRIGHT_O61,
    l: float = 0.5,
    collapsed: bool = True,
    progress=None,
) -> BenchmarkReport:
    if weights is None:
        raise ConfigError("benchmark needs trained network weights", field="weights")
    if iterations < 1 or repeats < 1 or warmup < 0:
        raise ConfigError("iterations and repeats must be >= 1, warmup >= 0", field="benchmark")
    Ns = sorted(int(n) for n in Ns)
    if len(Ns) < 2 or Ns[0] < 1:
        raise ConfigError("benchmark needs at least two sample sizes >= 1", field="Ns")
    model = MixtureModel(g, f, l)
    base = dict(max_iter=iterations, tol_theta=_TINY_TOL, tol_mean=_TINY_TOL, network=weights)
    engines = {
        "exact": EmConfig(e_step_engine="exact", collapse=False, **base),
        "network": EmConfig(e_step_engine="network", collapse=False, **base),
        "exact_collapsed": EmConfig(e_step_engine="exact", collapse=True, **base),
        "network_collapsed": EmConfig(e_step_engine="network", collapse=True, **base),
    }
    if not collapsed:
        engines = {k: v for k, v in engines.items() if "collapsed" not in k}
    records = [sample(model, N, seed=seed + k) for k, N in enumerate(Ns)]
    for rec in records:
        for cfg in engines.values():
            for _ in range(warmup):
                run_em(rec, g, None, cfg)
    # Repeats run round-robin over every (N, engine) pair, so a burst of
    # outside load is spread across the table instead of hitting one row.
    # An untimed call before each timed one keeps the measurement warm; the
    # previous pair may have been a large run that flushed the caches.
    times = {(k, name): [] for k in range(len(Ns)) for name in engines}
    used = {}
    for _ in range(repeats):
        for k, rec in enumerate(records):
            for name, cfg in engines.items():
                run_em(rec, g, None, cfg)
                dt, used[k, name] = _time_once(rec, g, cfg)
                times[k, name].append(dt)
    rows = []
    for k, N in enumerate(Ns):
        t = {name: float(np.median(times[k, name])) for name in engines}
        row = BenchmarkRow(
            N,
            t["exact"],
            t["network"],
            t["exact_collapsed"] if collapsed else None,
            t["network_collapsed"] if collapsed else None,
            used[k, "exact"],
            used[k, "network"],
        )
        rows.append(row)
        if progress is not None:
            progress(row)
    return BenchmarkReport(rows, iterations, repeats, warmup, environment())
