"""Learning h(t, y) = P(Y_T in S | Y_t = y) and its gradient from pretrained
trajectories, and the guidance drift built from them.

h is fit by regressing h(t_i, Y_{t_i}) onto the terminal indicator (martingale
loss).  Its gradient is fit either by regressing onto the covariation
increments ``dh dY / (g^2 dt)`` or, in ``"analytic-ito"`` mode, onto the input
gradient of the fitted h.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approximator import MLP, OptimizerConfig, fit_regression
from .oracle import analytic_h
from .sampler import PRETRAINED
from .schedule import DomainError, NoiseSchedule
from .sets import indicator, set_from_dict

EPS_H = 1e-4
C_CLIP = 1e3


class OffPolicyError(ValueError):
    """Raised when guidance training is handed anything but pretrained paths."""


class HModel:
    """Sigmoid-output network for h.  The floor ``eps_h`` is applied only
    where h divides the gradient; :meth:`value` returns the raw net output."""

    def __init__(self, net, eps_h=EPS_H):
        if net.output != "sigmoid" or net.out_dim != 1:
            raise ValueError("HModel needs a scalar sigmoid-output net")
        self.net = net
        self.eps_h = float(eps_h)
        self.dim = net.state_dim
        self.trace = None

    @classmethod
    def create(cls, dim, T, hidden=(128, 128), activation="tanh", seed=0, eps_h=EPS_H):
        return cls(MLP(dim, hidden, 1, activation, "sigmoid", T=T, seed=seed), eps_h)

    def value(self, t, y):
        return self.net(t, y)[:, 0]

    def floored(self, t, y):
        return np.maximum(self.value(t, y), self.eps_h)

    def value_and_grad(self, t, y):
        return self.net.value_and_grad_input(t, y)


class QModel:
    """Network for the gradient of h, output dimension d."""

    def __init__(self, net):
        if net.out_dim != net.state_dim:
            raise ValueError("QModel output dimension must equal the state dimension")
        self.net = net
        self.dim = net.state_dim
        self.trace = None

    @classmethod
    def create(cls, dim, T, hidden=(128, 128), activation="tanh", seed=0):
        return cls(MLP(dim, hidden, dim, activation, "identity", T=T, seed=seed))

    def __call__(self, t, y):
        return self.net(t, y)


class AnalyticH:
    """Closed-form h of the exact-score Gaussian case, with the HModel interface."""

    def __init__(self, sched, prior, S, eps_h=EPS_H):
        self.sched, self.prior, self.S = sched, prior, S
        self.eps_h = eps_h
        self.dim = prior.dim

    def value(self, t, y):
        return analytic_h(self.sched, self.prior, self.S, t, y)[0]

    def floored(self, t, y):
        return np.maximum(self.value(t, y), self.eps_h)

    def value_and_grad(self, t, y):
        h, gl = analytic_h(self.sched, self.prior, self.S, t, y)
        return h, h[:, None] * gl

    def grad_log(self, t, y):
        return analytic_h(self.sched, self.prior, self.S, t, y)[1]


class FunctionH:
    """h given by a plain function and its gradient (test probes)."""

    def __init__(self, fn, grad, dim=1, eps_h=EPS_H):
        self.fn, self.grad = fn, grad
        self.dim = dim
        self.eps_h = eps_h

    def _y(self, y):
        return np.asarray(y, dtype=float).reshape(-1, self.dim)

    def value(self, t, y):
        y = self._y(y)
        return np.broadcast_to(np.asarray(self.fn(t, y), dtype=float), (len(y),)).copy()

    def floored(self, t, y):
        return np.maximum(self.value(t, y), self.eps_h)

    def value_and_grad(self, t, y):
        y = self._y(y)
        g = np.broadcast_to(np.asarray(self.grad(t, y), dtype=float), y.shape).copy()
        return self.value(t, y), g


def check_pretrained(batches):
    if not batches:
        raise ValueError("need at least one trajectory batch")
    for b in batches:
        if b.provenance != PRETRAINED:
            raise OffPolicyError(
                f"guidance is learned off-policy from pretrained paths; got a {b.provenance!r} batch"
            )
        if b.states is None:
            raise ValueError("batch stores terminal states only; simulate with store='full'")
        if b.n_paths == 0:
            raise ValueError("empty trajectory batch")


def _eval_chunked(fn, t, y, chunk=65536):
    out = [fn(t[i : i + chunk], y[i : i + chunk]) for i in range(0, len(y), chunk)]
    if isinstance(out[0], tuple):
        return tuple(np.concatenate(parts) for parts in zip(*out))
    return np.concatenate(out)


def martingale_loss(h, batch, S, per_path=False):
    """``T`` times the mean over paths and grid times of
    ``(h(t_i, Y_{t_i}) - 1(Y_{t_K} in S))^2``."""
    check_pretrained([batch])
    n, K1, d = batch.states.shape
    ind = indicator(S, batch.terminal).astype(float)
    t = np.tile(batch.grid, n)
    y = batch.states.reshape(n * K1, d)
    vals = _eval_chunked(h.value, t, y).reshape(n, K1)
    T = batch.schedule.get("T", 1.0) if batch.schedule else 1.0
    per = T * np.mean((vals - ind[:, None]) ** 2, axis=1)
    return per if per_path else float(per.mean())


class _PathPool:
    """Uniform draws of (path, grid index) pairs across several batches."""

    def __init__(self, batches):
        self.batches = batches
        sizes = np.array([b.n_paths * (b.K + 1) for b in batches], dtype=float)
        self.p = sizes / sizes.sum()

    def draw(self, rng, size):
        which = rng.choice(len(self.batches), size=size, p=self.p)
        t = np.empty(size)
        y = np.empty((size, self.batches[0].dim))
        term = np.empty((size, self.batches[0].dim))
        for k in np.unique(which):
            sel = np.flatnonzero(which == k)
            b = self.batches[k]
            paths = rng.integers(0, b.n_paths, len(sel))
            idx = rng.integers(0, b.K + 1, len(sel))
            t[sel] = b.grid[idx]
            y[sel] = b.states[paths, idx]
            term[sel] = b.terminal[paths]
        return t, y, term


def train_h(h, batches, S, opt=None, seed=0):
    """Minibatch descent on the martingale loss over pretrained batches."""
    if not isinstance(batches, (list, tuple)):
        batches = [batches]
    check_pretrained(batches)
    if len({b.dim for b in batches}) != 1 or batches[0].dim != h.dim:
        raise ValueError("batch dimension does not match the model")
    opt = opt or OptimizerConfig()
    pool = _PathPool(batches)

    def draw(rng, size):
        t, y, term = pool.draw(rng, size)
        return t, y, indicator(S, term).astype(float), None

    h.trace = fit_regression(h.net, draw, opt, seed=seed, name="h")
    return h


@dataclass
class CovTargets:
    t: np.ndarray
    y: np.ndarray
    target: np.ndarray
    mode: str = "increment"

    def __len__(self):
        return len(self.t)


def cov_targets(h, batch, mode="increment", chunk=65536):
    """Regression targets for grad h, anchored at the left point ``(t_i, Y_{t_i})``.

    ``"increment"``: ``(h_{i+1} - h_i)(Y_{i+1} - Y_i) / (g(T - t_i)^2 dt_i)``.
    ``"analytic-ito"``: the input gradient of ``h`` at ``(t_i, Y_{t_i})``.
    """
    check_pretrained([batch])
    if batch.increments is None or batch.integrator != "sde":
        raise ValueError(
            "covariation targets need SDE paths with increments; "
            "simulate the pretrained SDE even when sampling with the ODE"
        )
    sched = NoiseSchedule.from_dict(batch.schedule)
    n, K1, d = batch.states.shape
    K = K1 - 1
    t_left = np.tile(batch.grid[:-1], n)
    y_left = batch.states[:, :-1].reshape(n * K, d)
    if mode == "analytic-ito":
        target = _eval_chunked(lambda a, b: h.value_and_grad(a, b)[1], t_left, y_left, chunk)
        return CovTargets(t_left, y_left, target, mode)
    if mode != "increment":
        raise ValueError(f"unknown covariation target mode {mode!r}")
    t_all = np.tile(batch.grid, n)
    vals = _eval_chunked(h.value, t_all, batch.states.reshape(n * K1, d), chunk).reshape(n, K1)
    dh = np.diff(vals, axis=1)
    dy = np.diff(batch.states, axis=1)
    dt = np.diff(batch.grid)
    g2 = np.array([sched.coeffs(sched.T - t)[1] ** 2 for t in batch.grid[:-1]])
    target = dh[:, :, None] * dy / (g2 * dt)[None, :, None]
    return CovTargets(t_left, y_left, target.reshape(n * K, d), mode)


def train_q(q, targets, opt=None, seed=0):
    """Minibatch descent on ``mean |q(t, y) - target|^2``."""
    if len(targets) == 0:
        raise ValueError("no covariation targets")
    opt = opt or OptimizerConfig()

    def draw(rng, size):
        idx = rng.integers(0, len(targets), size)
        return targets.t[idx], targets.y[idx], targets.target[idx], None

    q.trace = fit_regression(q.net, draw, opt, seed=seed, name="q")
    return q


class Guide:
    """Guidance drift ``grad h / h`` (ML), ``q / h`` (MCL) or the exact
    ``grad log h`` (oracle), norm-clipped to ``c_clip / (T - t)``.

    Counts evaluations and clip hits for telemetry.
    """

    def __init__(self, mode, h, T, q=None, c_clip=C_CLIP, eps_h=None):
        mode = mode.upper() if mode.lower() != "oracle" else "oracle"
        if mode not in ("ML", "MCL", "oracle"):
            raise ValueError(f"unknown guidance mode {mode!r}")
        if mode == "MCL" and q is None:
            raise ValueError("MCL guidance needs a q model")
        if mode == "oracle" and not hasattr(h, "grad_log"):
            raise ValueError("oracle guidance needs an analytic h")
        self.mode, self.h, self.q = mode, h, q
        self.T = float(T)
        self.c_clip = float(c_clip)
        self.eps_h = getattr(h, "eps_h", EPS_H) if eps_h is None else float(eps_h)
        self.n_evals = 0
        self.n_clipped = 0

    def raw(self, t, y):
        if self.mode == "oracle":
            return self.h.grad_log(t, y)
        if self.mode == "ML":
            hv, gh = self.h.value_and_grad(t, y)
            return gh / np.maximum(hv, self.eps_h)[:, None]
        return self.q(t, y) / np.maximum(self.h.value(t, y), self.eps_h)[:, None]

    def __call__(self, t, y):
        if np.any(np.asarray(t) >= self.T):
            raise DomainError("guidance drift is undefined at t >= T")
        drift = self.raw(t, y)
        lim = self.c_clip / (self.T - np.asarray(t, dtype=float))
        norm = np.linalg.norm(drift, axis=1)
        over = norm > lim
        if np.any(over):
            drift = drift.copy()
            drift[over] *= (np.broadcast_to(lim, norm.shape)[over] / norm[over])[:, None]
        self.n_evals += len(norm)
        self.n_clipped += int(over.sum())
        return drift

    @property
    def clip_fraction(self):
        return self.n_clipped / self.n_evals if self.n_evals else 0.0


def guidance_drift(mode, h, q, t, y, T, c_clip=C_CLIP):
    return Guide(mode, h, T, q=q, c_clip=c_clip)(t, y)


def save_guidance(model, path, S, sched, seed, role):
    """Parameters in the binary format plus ``<path>.json`` manifest and
    ``<path>.trace.csv`` loss trace."""
    path = Path(path)
    extra = {"role": role, "S": S.to_dict(), "schedule": sched.to_dict(), "seed": int(seed)}
    if role == "h":
        extra["eps_h"] = model.eps_h
    model.net.save(path, extra=extra)
    manifest = dict(extra, arch=model.net.arch(), params=path.name)
    if model.trace is not None and len(model.trace):
        trace_path = path.with_suffix(".trace.csv")
        np.savetxt(trace_path, model.trace, delimiter=",", header="iteration,loss", comments="", fmt="%.17g")
        manifest["trace"] = trace_path.name
        manifest["final_loss"] = float(model.trace[-1, 1])
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_guidance(path):
    """Returns ``(model, S, schedule dict)``."""
    net = MLP.load(path)
    ex = net.extra
    role = ex.get("role")
    if role == "h":
        model = HModel(net, ex.get("eps_h", EPS_H))
    elif role == "q":
        model = QModel(net)
    else:
        raise ValueError(f"{path}: not a guidance model (role={role!r})")
    return model, set_from_dict(ex["S"]), ex["schedule"]
