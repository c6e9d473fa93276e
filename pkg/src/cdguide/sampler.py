"""Backward-process simulation (Euler-Maruyama / explicit-Euler probability flow)
and trajectory storage."""

import zlib
from dataclasses import dataclass, field

import numpy as np

from ._io import FormatError, read_blob, write_blob
from .approximator import NumericalError

TRAJ_FORMAT_VERSION = 1

PRETRAINED = "pretrained"
GUIDED = "guided"


def stream(seed, stage, index):
    """Independent generator for ``(seed, stage, index)``."""
    key = zlib.crc32(stage.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key, int(index)])))


@dataclass
class TrajectoryBatch:
    grid: np.ndarray
    terminal: np.ndarray
    states: np.ndarray | None = None
    increments: np.ndarray | None = None
    seed: int = 0
    schedule: dict = field(default_factory=dict)
    integrator: str = "sde"
    provenance: str = PRETRAINED
    flagged: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.terminal.shape[0]

    @property
    def dim(self):
        return self.terminal.shape[1]

    @property
    def K(self):
        return len(self.grid) - 1

    def equals(self, other):
        """Bitwise equality of all numeric payloads."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.grid, other.grid)
            and same(self.terminal, other.terminal)
            and same(self.states, other.states)
            and same(self.increments, other.increments)
        )

    def save(self, path):
        arrays = {"grid": self.grid, "terminal": self.terminal}
        if self.states is not None:
            arrays["states"] = self.states
        if self.increments is not None:
            arrays["increments"] = self.increments
        header = {
            "seed": int(self.seed),
            "schedule": self.schedule,
            "integrator": self.integrator,
            "provenance": self.provenance,
            "flagged": int(self.flagged),
            "meta": self.meta,
        }
        write_blob(path, "trajectories", TRAJ_FORMAT_VERSION, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = read_blob(path, "trajectories", TRAJ_FORMAT_VERSION)
        batch = cls(
            grid=arrays["grid"],
            terminal=arrays["terminal"],
            states=arrays.get("states"),
            increments=arrays.get("increments"),
            seed=header["seed"],
            schedule=header["schedule"],
            integrator=header["integrator"],
            provenance=header["provenance"],
            flagged=header["flagged"],
            meta=header["meta"],
        )
        n, K = batch.terminal.shape[0], batch.K
        if batch.states is not None and batch.states.shape[:2] != (n, K + 1):
            raise FormatError(f"{path}: states shape {batch.states.shape} inconsistent with grid/terminal")
        if batch.increments is not None and batch.increments.shape[:2] != (n, K):
            raise FormatError(f"{path}: increments shape {batch.increments.shape} inconsistent")
        return batch

    def save_terminal_csv(self, path):
        cols = ",".join(f"y{k}" for k in range(self.dim))
        np.savetxt(path, self.terminal, delimiter=",", header=cols, comments="", fmt="%.17g")


def save_trajectories(batch, path):
    batch.save(path)


def load_trajectories(path):
    return TrajectoryBatch.load(path)


def base_drift(score, sched, t, y, ode=False):
    """Pretrained drift ``-f(T-t, y) + c g(T-t)^2 s(T-t, y)``, c = 1 (SDE) or 1/2 (ODE)."""
    s = sched.T - t
    f_lin, g = sched.coeffs(s)
    g2 = 0.5 * g * g if ode else g * g
    return -f_lin * y + g2 * score(s, y)


def integrate(
    drift,
    sched,
    grid,
    n_paths,
    dim,
    seed,
    stochastic=True,
    store="full",
    stage="paths",
    chunk=4096,
    max_flag_frac=1e-3,
):
    """Euler scheme from ``Y_0 ~ p_noise`` along ``grid``.

    ``drift(t, y)`` gives the full drift.  Each path owns the generator
    ``stream(seed, stage, path)``; its first ``dim`` draws give ``Y_0`` and
    the following ``K * dim`` the Brownian increments.
    """
    grid = np.asarray(grid, dtype=float)
    if grid[0] < 0 or grid[-1] >= sched.T + 1e-12 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing inside [0, T]")
    if store not in ("full", "terminal"):
        raise ValueError(f"unknown store mode {store!r}")
    K = len(grid) - 1
    dts = np.diff(grid)
    gbar = np.array([sched.coeffs(sched.T - t)[1] for t in grid[:-1]])
    prior_sd = np.sqrt(sched.prior_var())
    full = store == "full"
    states = np.empty((n_paths, K + 1, dim)) if full else None
    incs = np.empty((n_paths, K, dim)) if (full and stochastic) else None
    terminal = np.empty((n_paths, dim))
    for start in range(0, n_paths, chunk):
        stop = min(start + chunk, n_paths)
        m = stop - start
        need = (K + 1) * dim if stochastic else dim
        draws = np.empty((m, need))
        for j in range(m):
            draws[j] = stream(seed, stage, start + j).standard_normal(need)
        y = prior_sd * draws[:, :dim]
        if stochastic:
            noise = draws[:, dim:].reshape(m, K, dim)
        if full:
            states[start:stop, 0] = y
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(K):
                dt = dts[i]
                y = y + drift(grid[i], y) * dt
                if stochastic:
                    db = np.sqrt(dt) * noise[:, i]
                    y = y + gbar[i] * db
                    if full:
                        incs[start:stop, i] = db
                if full:
                    states[start:stop, i + 1] = y
        terminal[start:stop] = y
    bad = ~np.all(np.isfinite(terminal), axis=1)
    if full:
        bad |= ~np.all(np.isfinite(states), axis=(1, 2))
    flagged = int(bad.sum())
    if n_paths and flagged / n_paths > max_flag_frac:
        raise NumericalError(f"{flagged} of {n_paths} paths became non-finite")
    if flagged:
        keep = ~bad
        terminal = terminal[keep]
        states = states[keep] if full else None
        incs = incs[keep] if incs is not None else None
    return terminal, states, incs, flagged


def _sample(score, sched, grid, n_paths, seed, ode, store, chunk):
    dim = score.dim

    def drift(t, y):
        return base_drift(score, sched, t, y, ode=ode)

    terminal, states, incs, flagged = integrate(
        drift, sched, grid, n_paths, dim, seed,
        stochastic=not ode, store=store, chunk=chunk,
    )
    return TrajectoryBatch(
        grid=np.asarray(grid, dtype=float).copy(),
        terminal=terminal,
        states=states,
        increments=incs,
        seed=int(seed),
        schedule=sched.to_dict(),
        integrator="ode" if ode else "sde",
        provenance=PRETRAINED,
        flagged=flagged,
    )


def sample_sde(score, sched, grid, n_paths, seed, store="full", chunk=4096):
    """Euler-Maruyama on ``dY = [-f + g^2 s] dt + g dB`` (coefficients at T - t)."""
    return _sample(score, sched, grid, n_paths, seed, False, store, chunk)


def sample_ode(score, sched, grid, n_paths, seed, store="full", chunk=4096):
    """Explicit Euler on the probability flow ``dY/dt = -f + g^2 s / 2``."""
    return _sample(score, sched, grid, n_paths, seed, True, store, chunk)
