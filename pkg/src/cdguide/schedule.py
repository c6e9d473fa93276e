"""Noise schedules of the forward SDE ``dX = f_lin(t) X dt + g(t) dW`` and time grids.

Three kinds are supported, all with drift linear in ``x``:

* ``VE``     g(t) = sqrt(2t + eps), zero drift
* ``VP``     beta(t) = a + (b - a) t / T, f = -beta/2 x, g = sqrt(beta)
* ``VEExp``  g(t) = sigma**t, zero drift

For every kind the forward kernel is ``X_t | X_0 ~ N(m(t) X_0, v(t) I)`` with
closed-form ``m`` (:meth:`NoiseSchedule.mean_scale`) and ``v``
(:meth:`NoiseSchedule.noise_var`).
"""

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Time argument outside the schedule horizon."""


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: float = 1.0
    eps: float = 1e-5
    a: float = 0.1
    b: float = 20.0
    sigma: float = 25.0

    def __post_init__(self):
        if self.kind not in ("VE", "VP", "VEExp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.kind == "VE" and not self.eps > 0:
            raise ValueError("VE requires eps > 0")
        if self.kind == "VP" and not (self.a > 0 and self.b >= self.a):
            raise ValueError("VP requires b >= a > 0")
        if self.kind == "VEExp" and not self.sigma > 1:
            raise ValueError("VEExp requires sigma > 1")

    # constructors matching the usual parameter names
    @classmethod
    def ve(cls, eps=1e-5, T=1.0):
        return cls("VE", T=T, eps=eps)

    @classmethod
    def vp(cls, beta_min=0.1, beta_max=20.0, T=1.0):
        return cls("VP", T=T, a=beta_min, b=beta_max)

    @classmethod
    def ve_exp(cls, sigma=25.0, T=1.0):
        return cls("VEExp", T=T, sigma=sigma)

    def to_dict(self):
        out = {"kind": self.kind, "T": self.T}
        if self.kind == "VE":
            out["eps"] = self.eps
        elif self.kind == "VP":
            out.update(a=self.a, b=self.b)
        else:
            out["sigma"] = self.sigma
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.T) or np.any(~np.isfinite(t)):
            raise DomainError(f"time outside [0, {self.T}]: {t}")
        return t

    def beta(self, t):
        return self.a + (self.b - self.a) * t / self.T

    def coeffs(self, t):
        """Return ``(f_lin, g)`` so that ``f(t, x) = f_lin * x``."""
        t = self._check(t)
        if self.kind == "VE":
            f_lin, g = np.zeros_like(t), np.sqrt(2.0 * t + self.eps)
        elif self.kind == "VP":
            beta = self.beta(t)
            f_lin, g = -0.5 * beta, np.sqrt(beta)
        else:
            f_lin, g = np.zeros_like(t), self.sigma**t
        if f_lin.ndim == 0:
            return float(f_lin), float(g)
        return f_lin, g

    def mean_scale(self, t):
        """``m(t) = exp(int_0^t f_lin)``."""
        t = self._check(t)
        if self.kind == "VP":
            return np.exp(-0.5 * (self.a * t + 0.5 * (self.b - self.a) * t * t / self.T))
        return np.ones_like(t)

    def noise_var(self, t):
        """Variance added by the forward kernel from 0 to ``t``."""
        t = self._check(t)
        if self.kind == "VE":
            return t * t + self.eps * t
        if self.kind == "VP":
            return -np.expm1(-(self.a * t + 0.5 * (self.b - self.a) * t * t / self.T))
        ls = np.log(self.sigma)
        return np.expm1(2.0 * ls * t) / (2.0 * ls)

    def noise_std(self, t):
        return np.sqrt(self.noise_var(t))

    def prior_var(self):
        """Per-coordinate variance of ``p_noise``."""
        if self.kind == "VE":
            return self.T**2
        if self.kind == "VP":
            return 1.0
        return float(self.noise_var(self.T))

    def sample_prior(self, rng, n, d):
        return np.sqrt(self.prior_var()) * rng.standard_normal((n, d))

    def lipschitz_bounds(self):
        """Upper bounds on |dg/dt| and |df_lin/dt| over [0, T]."""
        if self.kind == "VE":
            return 1.0 / np.sqrt(self.eps), 0.0
        if self.kind == "VP":
            slope = (self.b - self.a) / self.T
            return 0.5 * slope / np.sqrt(self.a), 0.5 * slope
        return np.log(self.sigma) * self.sigma**self.T, 0.0


def forward_marginal_gaussian(sched, prior, t):
    """Law of ``X_t`` when ``X_0`` follows the Gaussian mixture ``prior``."""
    from .score import GaussianMixture

    m = float(sched.mean_scale(t))
    v = float(sched.noise_var(t))
    d = prior.dim
    return GaussianMixture(
        prior.weights.copy(),
        m * prior.means,
        m * m * prior.covs + v * np.eye(d)[None],
    )


def _invert_std(sched, targets, tol=1e-10):
    lo = np.zeros_like(targets)
    hi = np.full_like(targets, sched.T)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        above = sched.noise_std(mid) > targets
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def make_grid(sched, K=500, spacing="uniform", eps_T=None):
    """Time grid ``0 = t_0 < ... < t_K = T - eps_T`` for the backward process.

    ``noise-level`` spacing places the grid so that the forward perturbation
    std at the reversed times ``T - t_i`` decreases linearly in ``i``.
    """
    if eps_T is None:
        eps_T = 1e-3 * sched.T
    if int(K) != K or K < 2:
        raise GridError(f"need at least 2 steps, got K={K}")
    K = int(K)
    if not 0 <= eps_T < sched.T:
        raise GridError(f"terminal cutoff must lie in [0, T), got {eps_T}")
    end = sched.T - eps_T
    if spacing == "uniform":
        grid = np.linspace(0.0, end, K + 1)
    elif spacing == "noise-level":
        s_hi, s_lo = float(sched.noise_std(sched.T)), float(sched.noise_std(eps_T))
        targets = s_hi + (s_lo - s_hi) * np.arange(K + 1) / K
        s = _invert_std(sched, targets)
        s[0], s[-1] = sched.T, eps_T
        grid = sched.T - s
    else:
        raise GridError(f"unknown spacing {spacing!r}")
    if np.any(np.diff(grid) <= 0):
        raise GridError("grid inversion produced non-increasing times")
    return grid
