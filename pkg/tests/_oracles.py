"""Independent reference computations used by the tests.

Nothing here calls into the package's numerical code: pmfs come from mpmath
(closed form) or from quadrature of the Poisson-Gamma integral, and grid
posteriors are explicit products in extended precision.
"""

from itertools import combinations_with_replacement

import mpmath as mp
import numpy as np
from scipy import integrate, stats

mp.mp.dps = 40


def mp_pmf(alpha, beta, n):
    """Gamma-Poisson pmf from the closed form, in 40-digit arithmetic."""
    a, b = mp.mpf(alpha), mp.mpf(beta)
    return mp.gamma(n + a) / (mp.gamma(a) * mp.factorial(n)) * (b / (1 + b)) ** a * (1 / (1 + b)) ** n


def mp_cdf(alpha, beta, n):
    """P(N <= n) through the regularized incomplete beta function."""
    p = mp.mpf(beta) / (1 + mp.mpf(beta))
    return mp.betainc(alpha, n + 1, 0, p, regularized=True)


def quad_pmf(alpha, beta, n):
    """P(n) as the integral over the rate of Poisson(n | lam) * Gamma(lam | alpha, beta)."""
    f = lambda lam: stats.poisson.pmf(n, lam) * stats.gamma.pdf(lam, alpha, scale=1.0 / beta)  # noqa: E731
    val, _ = integrate.quad(f, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def pmf_table(alpha, beta, n_max):
    return np.array([mp_pmf(alpha, beta, n) for n in range(n_max + 1)], dtype=np.longdouble)


def multisets(n_values, max_size):
    for k in range(1, max_size + 1):
        yield from combinations_with_replacement(range(n_values), k)


def product_posteriors(sets, g_table, f_table, L):
    """Mean and SD of the grid posterior of every multiset, by direct product.

    The likelihood of each node is the plain product of per-shot mixture
    probabilities, computed in ``np.longdouble``; no logs, no rescaling.
    """
    nodes = np.linspace(0, 1, L).astype(np.longdouble)
    # mixture probability of each count value at each node
    mix = (1 - nodes)[None, :] * g_table[:, None] + nodes[None, :] * f_table[:, None]
    by_size = {}
    for s in sets:
        by_size.setdefault(len(s), []).append(s)
    out = {}
    for k, group in by_size.items():
        for start in range(0, len(group), 256):
            chunk = group[start : start + 256]
            like = np.prod(mix[np.array(chunk)], axis=1)  # (M, L)
            post = like / like.sum(axis=1, keepdims=True)
            m = post @ nodes
            v = np.sum(post * (nodes[None, :] - m[:, None]) ** 2, axis=1)
            for s, mm, vv in zip(chunk, m, v):
                out[s] = (float(mm), float(np.sqrt(vv)))
    return [out[s] for s in sets]
