"""Ground truth for the Gaussian test cases.

With an exact score the backward process started at time t in state y ends
at ``X_0 | X_{T-t} = y``.  For a single Gaussian prior that law is Gaussian
(conjugacy), so ``h(t, y) = P(Y_T in S | Y_t = y)`` is a Gaussian box mass.
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import solve_banded
from scipy.special import log_ndtr

from .schedule import DomainError
from .sets import Box

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def _log1mexp(x):
    # log(1 - exp(x)) for x <= 0
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x > -np.log(2.0)
    with np.errstate(divide="ignore"):
        out[small] = np.log(-np.expm1(x[small]))
        out[~small] = np.log1p(-np.exp(x[~small]))
    return out


def interval_logmass(m, sd, lo, hi):
    """``log P(lo < N(m, sd^2) < hi)`` and its derivative in ``m``."""
    m, sd = np.broadcast_arrays(np.asarray(m, float), np.asarray(sd, float))
    za = (lo - m) / sd
    zb = (hi - m) / sd
    upper = za > 0
    with np.errstate(invalid="ignore"):
        la = np.where(upper, log_ndtr(-zb), log_ndtr(za))
        lb = np.where(upper, log_ndtr(-za), log_ndtr(zb))
        logmass = lb + _log1mexp(np.minimum(la - lb, 0.0))
        logphi_a = -0.5 * za * za - _LOG_SQRT_2PI
        logphi_b = -0.5 * zb * zb - _LOG_SQRT_2PI
        dlog = (np.exp(logphi_a - logmass) - np.exp(logphi_b - logmass)) / sd
    dlog = np.where(np.isfinite(dlog), dlog, 0.0)
    return logmass, dlog


def _posterior(sched, prior, s):
    """Posterior of X_0 given X_s = y: returns (A, b, V) with mean A y + b, cov V."""
    if prior.n_components != 1:
        raise NotImplementedError("analytic h supports single-Gaussian priors only")
    mu, cov = prior.means[0], prior.covs[0]
    lam, U = np.linalg.eigh(cov)
    a = np.atleast_1d(sched.mean_scale(s)).astype(float)
    w = np.atleast_1d(sched.noise_var(s)).astype(float)
    pv = 1.0 / (1.0 / lam[None, :] + (a * a / w)[:, None])  # (ns, d) in eigenbasis
    V = np.einsum("ij,nj,kj->nik", U, pv, U)
    prec_mu = np.linalg.solve(cov, mu)
    b = np.einsum("nij,j->ni", V, prec_mu)
    A = V * (a / w)[:, None, None]
    return A, b, V


def analytic_h(sched, prior, S, t, y, return_log=False):
    """``(h, grad log h)`` of the exact-score backward process at ``(t, y)``.

    ``t`` may be a scalar or an array matching the batch of ``y``.
    """
    if not isinstance(S, Box):
        raise NotImplementedError("analytic h supports interval/box guidance sets only")
    y = np.asarray(y, dtype=float)
    d = prior.dim
    y = y.reshape(-1, d)
    n = y.shape[0]
    t = np.asarray(t, dtype=float)
    if np.any(t >= sched.T) or np.any(t < 0):
        raise DomainError(f"analytic h needs 0 <= t < T, got {t}")
    s_vals, inverse = np.unique(np.broadcast_to(sched.T - t, (n,)), return_inverse=True)
    A, b, V = _posterior(sched, prior, s_vals)
    A, b, V = A[inverse], b[inverse], V[inverse]
    axes = S.constrained_axes
    if len(axes) > 1:
        sub = V[:, axes][:, :, axes]
        off = sub - np.einsum("nii->ni", sub)[:, :, None] * np.eye(len(axes))[None]
        if np.max(np.abs(off)) > 1e-12 * np.max(np.abs(sub)):
            raise NotImplementedError("box constraints on correlated posterior axes")
    mean = np.einsum("nij,nj->ni", A, y) + b
    logh = np.zeros(n)
    grad = np.zeros((n, d))
    for j in axes:
        lm, dl = interval_logmass(mean[:, j], np.sqrt(V[:, j, j]), S.lower[j], S.upper[j])
        logh += lm
        grad += dl[:, None] * A[:, j, :]
    if return_log:
        return logh, grad
    return np.exp(logh), grad


class OracleGuide:
    """``grad log h`` of the exact-score process, as a guidance closure."""

    def __init__(self, sched, prior, S):
        self.sched, self.prior, self.S = sched, prior, S

    def h(self, t, y):
        return analytic_h(self.sched, self.prior, self.S, t, y)[0]

    def __call__(self, t, y):
        return analytic_h(self.sched, self.prior, self.S, t, y)[1]


def truncated_normal_stats(mu, var, lo=-np.inf, hi=np.inf):
    """Mass, mean and variance of ``N(mu, var)`` restricted to ``(lo, hi)``."""
    if not var > 0:
        raise ValueError("variance must be positive")
    if not lo < hi:
        raise ValueError(f"empty interval ({lo}, {hi})")
    sd = np.sqrt(var)
    a, b = (lo - mu) / sd, (hi - mu) / sd
    mass = float(np.exp(interval_logmass(mu, sd, lo, hi)[0]))
    mean, v = stats.truncnorm.stats(a, b, loc=mu, scale=sd, moments="mv")
    return mass, float(mean), float(v)


def truncated_normal_cdf(mu, var, lo=-np.inf, hi=np.inf):
    sd = np.sqrt(var)
    dist = stats.truncnorm((lo - mu) / sd, (hi - mu) / sd, loc=mu, scale=sd)
    return dist.cdf


class RejectionRefused(RuntimeError):
    pass


@dataclass
class RejectionResult:
    samples: np.ndarray
    acceptance: float
    n_proposed: int


def rejection_sample(prior, S, n, seed=0, probe=100_000, min_rate=1e-6, batch=200_000):
    """Exact draws from ``prior`` conditioned on ``S`` by accept/reject."""
    rng = np.random.default_rng(seed)
    x = prior.sample(rng, probe)
    keep = x[S.contains(x)]
    rate = len(keep) / probe
    if rate < min_rate:
        raise RejectionRefused(
            f"estimated acceptance {rate:.2e} below {min_rate:.0e} "
            f"({len(keep)} of {probe} probe draws in S); expected cost 1/rho too high"
        )
    chunks, total, proposed = [keep], len(keep), probe
    while total < n:
        x = prior.sample(rng, batch)
        k = x[S.contains(x)]
        chunks.append(k)
        total += len(k)
        proposed += batch
    acc = sum(len(c) for c in chunks)
    return RejectionResult(np.concatenate(chunks)[:n], acc / proposed, proposed)


# --- finite-difference check of the backward Kolmogorov equation -------------


class PDEError(RuntimeError):
    pass


@dataclass
class PDEReport:
    max_abs_error: float
    t: np.ndarray
    y: np.ndarray
    h_fd: np.ndarray
    h_exact: np.ndarray | None
    max_peclet: float


def _operator_bands(b, D, dy, boundary="neumann"):
    # L h = b h_y + D h_yy with central differences
    n = len(b)
    lower = D / dy**2 - b / (2 * dy)
    diag = np.full(n, -2.0) * D / dy**2
    upper = D / dy**2 + b / (2 * dy)
    if boundary == "neumann":
        # ghost h_{-1} = h_1: h_y = 0, h_yy = 2 (h_1 - h_0) / dy^2
        upper[0] = 2 * D[0] / dy**2
        lower[-1] = 2 * D[-1] / dy**2
    elif boundary == "linear":
        # ghost h_{-1} = 2 h_0 - h_1: h_yy = 0, one-sided h_y
        diag[0], upper[0] = -b[0] / dy, b[0] / dy
        diag[-1], lower[-1] = b[-1] / dy, -b[-1] / dy
    else:
        raise ValueError(f"unknown boundary condition {boundary!r}")
    return lower, diag, upper


def _apply(lower, diag, upper, h):
    out = diag * h
    out[:-1] += upper[:-1] * h[1:]
    out[1:] += lower[1:] * h[:-1]
    return out


def h_pde_check_1d(
    sched,
    score,
    S,
    n_y=400,
    n_t=400,
    y_range=(-11.0, 13.0),
    t_max_frac=0.95,
    prior=None,
    n_rannacher=4,
    boundary="linear",
):
    """Solve ``h_t + fbar h_y + g^2/2 h_yy = 0`` backward from ``1_S`` and compare.

    Crank-Nicolson on a uniform (t, y) grid; the first steps are split into
    implicit-Euler half steps to damp the discontinuous terminal data.
    ``boundary="linear"`` imposes ``h_yy = 0`` at both ends; ``"neumann"``
    imposes ``h_y = 0``, which is only accurate when the domain reaches the
    flat tails of h.  With ``prior`` given, the solution is compared against
    :func:`analytic_h` at all grid times ``t <= t_max_frac * T``.
    """
    if getattr(score, "dim", 1) != 1:
        raise ValueError("PDE check is one-dimensional")
    T = sched.T
    y = np.linspace(*y_range, n_y)
    dy = y[1] - y[0]
    t = np.linspace(0.0, T, n_t + 1)
    lo, hi = float(S.lower[0]), float(S.upper[0])
    left = np.clip(y - dy / 2, lo, hi)
    right = np.clip(y + dy / 2, lo, hi)
    h = (right - left) / dy

    def coeffs(ti):
        s = T - ti
        f_lin, g = sched.coeffs(s)
        b = -f_lin * y + g * g * score(s, y[:, None])[:, 0]
        return b, np.full(n_y, 0.5 * g * g)

    peclet = 0.0
    sol = np.empty((n_t + 1, n_y))
    sol[-1] = h
    for k in range(n_t, 0, -1):
        t1, t0 = t[k], t[k - 1]
        if n_t - k < n_rannacher // 2:
            # two implicit-Euler half steps
            sub = [(t1, 0.5 * (t1 + t0)), (0.5 * (t1 + t0), t0)]
            for ta, tb in sub:
                b, D = coeffs(tb)
                peclet = max(peclet, float(np.max(np.abs(b) * dy / (2 * np.maximum(D, 1e-300)))))
                lw, dg, up = _operator_bands(b, D, dy, boundary)
                dt = ta - tb
                ab = np.zeros((3, n_y))
                ab[0, 1:] = -dt * up[:-1]
                ab[1] = 1.0 - dt * dg
                ab[2, :-1] = -dt * lw[1:]
                h = solve_banded((1, 1), ab, h)
        else:
            dt = t1 - t0
            b1, D1 = coeffs(t1)
            b0, D0 = coeffs(t0)
            peclet = max(peclet, float(np.max(np.abs(b0) * dy / (2 * np.maximum(D0, 1e-300)))))
            rhs = h + 0.5 * dt * _apply(*_operator_bands(b1, D1, dy, boundary), h)
            lw, dg, up = _operator_bands(b0, D0, dy, boundary)
            ab = np.zeros((3, n_y))
            ab[0, 1:] = -0.5 * dt * up[:-1]
            ab[1] = 1.0 - 0.5 * dt * dg
            ab[2, :-1] = -0.5 * dt * lw[1:]
            h = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(h)):
            raise PDEError(f"non-finite solution at t={t0:.4g}; refine the grid")
        sol[k - 1] = h
    err = np.nan
    exact = None
    if prior is not None:
        mask = t <= t_max_frac * T + 1e-12
        tt, yy = np.meshgrid(t[mask], y, indexing="ij")
        exact = analytic_h(sched, prior, S, tt.ravel(), yy.ravel()[:, None])[0].reshape(tt.shape)
        err = float(np.max(np.abs(sol[mask] - exact)))
    return PDEReport(err, t, y, sol, exact, peclet)
