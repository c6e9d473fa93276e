"""Sampling the conditioned process with a guidance drift of scale eta."""

from dataclasses import asdict, dataclass

import numpy as np

from .sampler import GUIDED, TrajectoryBatch, base_drift, integrate
from .schedule import make_grid
from .sets import indicator


@dataclass
class GuidedSamplerConfig:
    mode: str = "ML"  # ML | MCL | oracle
    integrator: str = "sde"  # sde | ode
    eta: float = 1.0
    eps_T: float | None = None  # None -> 1e-3 T
    c_clip: float = 1e3
    K: int = 500
    spacing: str = "uniform"
    n_paths: int = 10_000
    seed: int = 0
    store: str = "terminal"
    chunk: int = 4096

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("guidance scale eta must be >= 0")
        if self.eps_T is not None and not self.eps_T > 0:
            raise ValueError("terminal cutoff eps_T must be > 0")
        if self.integrator not in ("sde", "ode"):
            raise ValueError(f"unknown integrator {self.integrator!r}")

    def grid(self, sched):
        eps_T = 1e-3 * sched.T if self.eps_T is None else self.eps_T
        return make_grid(sched, self.K, self.spacing, eps_T)

    def to_dict(self):
        return asdict(self)


def _sample_guided(score, sched, guide, cfg, ode, grid=None):
    grid = cfg.grid(sched) if grid is None else np.asarray(grid, dtype=float)
    eta = float(cfg.eta)
    half = 0.5 if ode else 1.0

    def drift(t, y):
        b = base_drift(score, sched, t, y, ode=ode)
        if eta == 0.0:
            return b
        g = sched.coeffs(sched.T - t)[1]
        return b + (half * eta * g * g) * guide(t, y)

    terminal, states, incs, flagged = integrate(
        drift, sched, grid, cfg.n_paths, score.dim, cfg.seed,
        stochastic=not ode, store=cfg.store, chunk=cfg.chunk,
    )
    meta = {"config": cfg.to_dict()}
    if hasattr(guide, "clip_fraction"):
        meta["clip_fraction"] = guide.clip_fraction
        meta["clip_hits"] = guide.n_clipped
        meta["guide_evals"] = guide.n_evals
    return TrajectoryBatch(
        grid=grid.copy(),
        terminal=terminal,
        states=states,
        increments=incs,
        seed=int(cfg.seed),
        schedule=sched.to_dict(),
        integrator="ode" if ode else "sde",
        provenance=GUIDED,
        flagged=flagged,
        meta=meta,
    )


def sample_guided_sde(score, sched, guide, cfg, grid=None):
    """Euler-Maruyama with drift ``-f + g^2 s + eta g^2 guide``."""
    return _sample_guided(score, sched, guide, cfg, False, grid)


def sample_guided_ode(score, sched, guide, cfg, grid=None):
    """Explicit Euler on ``-f + g^2 s / 2 + eta g^2 guide / 2``."""
    return _sample_guided(score, sched, guide, cfg, True, grid)


def sample_guided(score, sched, guide, cfg, grid=None):
    fn = sample_guided_ode if cfg.integrator == "ode" else sample_guided_sde
    return fn(score, sched, guide, cfg, grid)


def constraint_rate(batch, S):
    """Fraction of terminal states in ``S`` and its binomial standard error."""
    term = batch.terminal if isinstance(batch, TrajectoryBatch) else np.asarray(batch)
    if len(term) == 0:
        raise ValueError("constraint rate of an empty batch")
    r = float(indicator(S, term).mean())
    return r, float(np.sqrt(r * (1 - r) / len(term)))
