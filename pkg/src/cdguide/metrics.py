"""Distances between samples and distributions."""

import numpy as np
from scipy import integrate
from scipy.optimize import linear_sum_assignment

W2_EXACT_MAX_N = 4096


def _flat(x, name):
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


def ks_statistic(sample, other):
    """Kolmogorov-Smirnov distance of ``sample`` to a CDF callable or a second sample."""
    x = np.sort(_flat(sample, "sample"))
    n = len(x)
    if callable(other):
        F = np.asarray(other(x), dtype=float)
        upper = np.arange(1, n + 1) / n - F
        lower = F - np.arange(n) / n
        return float(max(upper.max(), lower.max(), 0.0))
    y = np.sort(_flat(other, "second sample"))
    pts = np.concatenate([x, y])
    Fx = np.searchsorted(x, pts, side="right") / n
    Fy = np.searchsorted(y, pts, side="right") / len(y)
    return float(np.max(np.abs(Fx - Fy)))


def w2_1d(a, b, rng=None):
    """W2 between two 1D samples by the sorted (quantile) coupling.

    Unequal sizes: the larger sample is subsampled without replacement to the
    smaller size using ``rng`` (default seed 0).
    """
    a, b = _flat(a, "sample_a"), _flat(b, "sample_b")
    if len(a) != len(b):
        rng = rng or np.random.default_rng(0)
        m = min(len(a), len(b))
        a = rng.choice(a, m, replace=False) if len(a) > m else a
        b = rng.choice(b, m, replace=False) if len(b) > m else b
    return float(np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2)))


def w2_exact(a, b):
    """Exact empirical W2 between equal-size point clouds via optimal assignment."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point cloud")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if len(a) > W2_EXACT_MAX_N:
        raise ValueError(f"n={len(a)} exceeds the exact assignment budget {W2_EXACT_MAX_N}")
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def default_bins(a, b, bins=64):
    pooled = np.concatenate([np.ravel(a), np.ravel(b)])
    lo, hi = np.quantile(pooled, [0.001, 0.999])
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def tv_histogram(a, b, bins=None):
    """Plug-in total variation ``1/2 sum |p_bin - q_bin|`` on shared bins.

    ``bins`` is an edge array or a count (default 64 equal-width bins over the
    pooled 0.1%-99.9% quantile range).  Mass outside the edges goes to two
    overflow cells so that disjoint samples score 1.
    """
    a, b = _flat(a, "sample_a"), _flat(b, "sample_b")
    if bins is None:
        bins = 64
    edges = default_bins(a, b, bins) if np.ndim(bins) == 0 else np.asarray(bins, dtype=float)
    if len(edges) < 2:
        raise ValueError("need at least one bin")
    full = np.concatenate([[-np.inf], edges, [np.inf]])
    pa = np.histogram(a, full)[0] / len(a)
    pb = np.histogram(b, full)[0] / len(b)
    return float(0.5 * np.abs(pa - pb).sum())


def _quad(fn, lo, hi, points):
    pts = [p for p in points if lo < p < hi and np.isfinite(p)]
    edges = [lo, *sorted(pts), hi]
    total, err = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        with np.errstate(all="ignore"):
            val, e = integrate.quad(fn, a, b, limit=200, epsabs=1e-12, epsrel=1e-10)
        total += val
        err += e
    if not np.isfinite(total) or err > 1e-7 + 1e-6 * abs(total):
        raise ArithmeticError(f"quadrature did not converge (estimate {total}, error {err})")
    return total


def lemma_predata_check(p, q, lo, hi, points=()):
    """Check ``d_TV(p|S, q|S) <= 3 / (2 rho) d_TV(p, q)`` with ``rho = q(S)``
    for 1D densities ``p``, ``q`` and ``S = (lo, hi)``.

    ``points`` lists locations (modes, crossings) that help the quadrature.
    Returns ``(lhs, rhs, holds)``.
    """
    pts = [lo, hi, *points]
    pS = _quad(p, lo, hi, pts)
    qS = _quad(q, lo, hi, pts)
    if not qS > 0:
        raise ValueError("q(S) must be positive")
    lhs = 0.5 * _quad(lambda x: abs(p(x) / pS - q(x) / qS), lo, hi, pts) if pS > 0 else 1.0
    tv = 0.5 * _quad(lambda x: abs(p(x) - q(x)), -np.inf, np.inf, pts)
    rhs = 1.5 / qS * tv
    return lhs, rhs, bool(lhs <= rhs + 1e-8)
