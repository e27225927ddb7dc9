"""Reference parameter sets for tests, examples and the CLI.

Short-exposure laws share ``beta = 2``; their bright means are 3 and 2
counts per shot, and the dark law of each pair was tuned with
:func:`tune_alpha` so the histogram overlap hits 0.61 and 0.72. The long-exposure pair has dark mean 1
and a broad bright law of mean 138.8.
"""

from __future__ import annotations

import numpy as np

from .count_model import SuperPoissonParams, overlap
from .experiments import RABI_TIMES, RabiModel, RamseyModel

BETA = 2.0

#: overlap 0.61 (dark mean 0.305, bright mean 3)
DARK_O61 = SuperPoissonParams(0.61, BETA)
BRIGHT_O61 = SuperPoissonParams(6.0, BETA)
#: overlap 0.72 (dark mean 0.213, bright mean 2)
DARK_O72 = SuperPoissonParams(0.426, BETA)
BRIGHT_O72 = SuperPoissonParams(4.0, BETA)
#: long-exposure regime: means 1 and 138.8
DARK_LONG = SuperPoissonParams(2.0, BETA)
BRIGHT_LONG = SuperPoissonParams(69.4, 0.5)

#: default pair for examples and the benchmark
DARK, BRIGHT = DARK_O61, BRIGHT_O61

#: Small fixture used by oracle checks.
ORACLE_G = SuperPoissonParams(1.0, 1.0)
ORACLE_F = SuperPoissonParams(9.0, 3.0)

PAIRS = {
    "o61": (DARK_O61, BRIGHT_O61),
    "o72": (DARK_O72, BRIGHT_O72),
    "long": (DARK_LONG, BRIGHT_LONG),
    "oracle": (ORACLE_G, ORACLE_F),
}

RABI = RabiModel.from_frequency(25.1e3, 0.87)
RAMSEY = RamseyModel.from_t2(6.43e-3, 0.767e3, phi=0.0, l0=0.5, amp=0.4)
RAMSEY_TIMES = tuple(np.round(np.arange(0.0, 10.0001e-3, 0.2e-3), 12))
SHOTS_PER_POINT = 200


def tune_alpha(other: SuperPoissonParams, beta: float, target: float, lo: float = 0.05, hi: float = 40.0, levels: int = 4, points: int = 101) -> float:
    """Brute-force ``alpha`` so that ``overlap((alpha, beta), other)`` is closest to ``target``.

    Scans ``points`` values on ``[lo, hi]`` and zooms around the best one
    ``levels`` times. The overlap is symmetric, so this tunes either law of a
    pair.
    """
    best = lo
    for _ in range(levels):
        grid = np.linspace(lo, hi, points)
        err = [abs(overlap(SuperPoissonParams(a, beta), other) - target) for a in grid]
        k = int(np.argmin(err))
        best = float(grid[k])
        step = grid[1] - grid[0]
        lo, hi = max(grid[0], best - step), min(grid[-1], best + step)
    return best
