"""Small fully-connected networks ``(t, x) -> R^m`` with hand-written backprop.

The same class backs the guidance function h, its gradient model q and the
learned score.  Parameters live in one flat float64 vector; layer weights are
views into it so optimizer updates touch a single array.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ._io import read_blob, write_blob

log = logging.getLogger(__name__)

PARAM_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _dact(name, z, a):
    # derivative given pre-activation z and activation a
    if name == "tanh":
        return 1.0 - a * a
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MLP:
    """Feed-forward net on the features ``(time embedding, x)``.

    ``time_embed="pair"`` feeds ``(t/T, sqrt(1 - t/T))``; ``"raw"`` feeds ``t``.
    ``output="sigmoid"`` squashes the last layer into (0, 1).
    """

    def __init__(
        self,
        state_dim,
        hidden=(128, 128),
        out_dim=1,
        activation="tanh",
        output="identity",
        T=1.0,
        time_embed="pair",
        seed=0,
        init_scale=1.0,
        zero_output=False,
    ):
        if output not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output transform {output!r}")
        if time_embed not in ("pair", "raw"):
            raise ValueError(f"unknown time embedding {time_embed!r}")
        _act(activation, np.zeros(1))
        self.state_dim = int(state_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = int(out_dim)
        self.activation = activation
        self.output = output
        self.T = float(T)
        self.time_embed = time_embed
        self.seed = int(seed)
        self.n_time = 2 if time_embed == "pair" else 1
        self.widths = (self.n_time + self.state_dim, *self.hidden, self.out_dim)
        self.n_params = sum(
            (i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:])
        )
        self.params = np.zeros(self.n_params)
        self._bind()
        rng = np.random.default_rng(self.seed)
        for k, (W, b) in enumerate(self.layers):
            last = k == len(self.layers) - 1
            if last and zero_output:
                continue
            fan_in, fan_out = W.shape[1], W.shape[0]
            std = init_scale * np.sqrt(2.0 / (fan_in + fan_out))
            W[...] = std * rng.standard_normal(W.shape)

    def _bind(self):
        self.layers = []
        off = 0
        for i, o in zip(self.widths[:-1], self.widths[1:]):
            W = self.params[off : off + i * o].reshape(o, i)
            off += i * o
            b = self.params[off : off + o]
            off += o
            self.layers.append((W, b))

    # --- bookkeeping --------------------------------------------------------

    def arch(self):
        return {
            "state_dim": self.state_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "output": self.output,
            "T": self.T,
            "time_embed": self.time_embed,
            "seed": self.seed,
        }

    def copy(self):
        new = MLP.__new__(MLP)
        new.__dict__.update(self.__dict__)
        new.params = self.params.copy()
        new._bind()
        return new

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.params[...] = flat

    def save(self, path, extra=None):
        header = {"arch": self.arch(), "extra": extra or {}}
        write_blob(path, "params", PARAM_FORMAT_VERSION, header, {"params": self.params})

    @classmethod
    def load(cls, path):
        header, arrays = read_blob(path, "params", PARAM_FORMAT_VERSION)
        arch = dict(header["arch"])
        arch["hidden"] = tuple(arch["hidden"])
        net = cls(**arch)
        net.set_params(arrays["params"])
        net.extra = header.get("extra", {})
        return net

    # --- evaluation ---------------------------------------------------------

    def features(self, t, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.state_dim == 1 else x[None, :]
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        if self.time_embed == "pair":
            u = t / self.T
            tf = np.stack([u, np.sqrt(np.clip(1.0 - u, 0.0, None))], axis=1)
        else:
            tf = t[:, None]
        return np.concatenate([tf, x], axis=1)

    def _forward(self, t, x):
        a = self.features(t, x)
        cache = [(None, a)]
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            z = a @ W.T + b
            if k < last:
                a = _act(self.activation, z)
            else:
                a = _sigmoid(z) if self.output == "sigmoid" else z
            cache.append((z, a))
        return a, cache

    def __call__(self, t, x):
        return self._forward(t, x)[0]

    fwd = __call__

    def _backward(self, cache, upstream, want_params=True):
        """Backprop ``upstream`` (n, m); returns (flat grad or None, d/dfeatures)."""
        grads = np.zeros(self.n_params) if want_params else None
        glayers = []
        if want_params:
            off = 0
            for i, o in zip(self.widths[:-1], self.widths[1:]):
                glayers.append(
                    (grads[off : off + i * o].reshape(o, i), grads[off + i * o : off + i * o + o])
                )
                off += i * o + o
        last = len(self.layers) - 1
        z, a = cache[-1]
        delta = upstream * a * (1.0 - a) if self.output == "sigmoid" else upstream
        for k in range(last, -1, -1):
            W, _ = self.layers[k]
            a_prev = cache[k][1]
            if want_params:
                gW, gb = glayers[k]
                gW[...] = delta.T @ a_prev
                gb[...] = delta.sum(axis=0)
            delta = delta @ W
            if k > 0:
                z_prev, _ = cache[k]
                delta = delta * _dact(self.activation, z_prev, a_prev)
        return grads, delta

    def grad_params(self, t, x, upstream):
        """Sum over the batch of ``J_params(t_i, x_i)^T upstream_i``."""
        out, cache = self._forward(t, x)
        upstream = np.asarray(upstream, dtype=float).reshape(out.shape)
        return self._backward(cache, upstream)[0]

    def grad_input(self, t, x):
        """Jacobian of the output w.r.t. the state, shape (n, m, d)."""
        out, cache = self._forward(t, x)
        n = out.shape[0]
        jac = np.empty((n, self.out_dim, self.state_dim))
        for j in range(self.out_dim):
            up = np.zeros_like(out)
            up[:, j] = 1.0
            jac[:, j, :] = self._backward(cache, up, want_params=False)[1][:, self.n_time :]
        return jac

    def value_and_grad_input(self, t, x):
        """Scalar-output shortcut: values (n,) and input gradients (n, d)."""
        if self.out_dim != 1:
            raise ValueError("value_and_grad_input needs a scalar-output net")
        out, cache = self._forward(t, x)
        g = self._backward(cache, np.ones_like(out), want_params=False)[1]
        return out[:, 0], g[:, self.n_time :]

    def loss_and_grad(self, t, x, target, weight=None):
        """Weighted mean squared error ``mean_i w_i |out_i - target_i|^2`` and its gradient."""
        out, cache = self._forward(t, x)
        target = np.asarray(target, dtype=float).reshape(out.shape)
        resid = out - target
        w = np.ones(out.shape[0]) if weight is None else np.asarray(weight, dtype=float)
        n = out.shape[0]
        loss = float(np.sum(w * np.sum(resid * resid, axis=1)) / n)
        up = (2.0 / n) * w[:, None] * resid
        return loss, self._backward(cache, up)[0]


# --- step sizes and updates -------------------------------------------------


@dataclass
class OptimizerConfig:
    """Step size ``delta_n = A / (n**zeta + B)``; optional Adam moments on top."""

    A: float = 0.1
    B: float = 100.0
    zeta: float = 1.0
    batch_size: int = 256
    iterations: int = 10000
    clip_norm: float | None = None
    adam: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100
    average_tail: float = 0.0  # Polyak-Ruppert: average the last fraction of iterates

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError("A must be positive")
        if self.B < 0:
            raise ValueError("B must be non-negative")
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")
        if not 0 <= self.average_tail < 1:
            raise ValueError("average_tail must lie in [0, 1)")

    def step_size(self, n):
        return self.A / (n**self.zeta + self.B)

    def robbins_monro(self):
        # sum delta_n diverges and sum delta_n^2 converges iff 1/2 < zeta <= 1
        return 0.5 < self.zeta <= 1.0

    def to_dict(self):
        return asdict(self)


def _clip(grad, clip_norm):
    if clip_norm is None:
        return grad
    norm = np.linalg.norm(grad)
    if norm > clip_norm:
        return grad * (clip_norm / norm)
    return grad


def sgd_step(net, grad, n, cfg):
    """Return a copy of ``net`` after ``phi <- phi - delta_n * grad``.

    Non-finite gradients leave the parameters unchanged; the copy's
    ``skipped_updates`` counter records it.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != net.params.shape:
        raise ValueError(f"gradient length {grad.shape} != parameter length {net.params.shape}")
    new = net.copy()
    new.skipped_updates = getattr(net, "skipped_updates", 0)
    if not np.all(np.isfinite(grad)):
        new.skipped_updates += 1
        return new
    new.params -= cfg.step_size(n) * _clip(grad, cfg.clip_norm)
    return new


class Optimizer:
    """In-place optimizer used inside training loops."""

    def __init__(self, net, cfg):
        self.net = net
        self.cfg = cfg
        self.n = 0
        self.skipped = 0
        if cfg.adam:
            self.m = np.zeros_like(net.params)
            self.v = np.zeros_like(net.params)

    def step(self, grad):
        if not np.all(np.isfinite(grad)):
            self.skipped += 1
            return False
        self.n += 1
        cfg = self.cfg
        grad = _clip(grad, cfg.clip_norm)
        lr = cfg.step_size(self.n)
        if cfg.adam:
            self.m *= cfg.beta1
            self.m += (1 - cfg.beta1) * grad
            self.v *= cfg.beta2
            self.v += (1 - cfg.beta2) * grad * grad
            mhat = self.m / (1 - cfg.beta1**self.n)
            vhat = self.v / (1 - cfg.beta2**self.n)
            self.net.params -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        else:
            self.net.params -= lr * grad
        return True


def fit_regression(net, draw_batch, cfg, seed=0, name="net"):
    """Minibatch descent on a weighted squared loss.

    ``draw_batch(rng, size)`` returns ``(t, x, target, weight_or_None)``.
    Returns the loss trace as an array of (iteration, running mean loss) rows.
    Aborts if the loss stays above 10x its initial level for 100 consecutive
    steps, or turns non-finite.  With ``cfg.average_tail > 0`` the returned
    parameters are the mean of the iterates over that final fraction of steps.
    """
    rng = np.random.default_rng(seed)
    opt = Optimizer(net, cfg)
    trace = []
    acc, acc_n = 0.0, 0
    initial = None
    above = 0
    avg_start = cfg.iterations - int(cfg.average_tail * cfg.iterations)
    avg, avg_n = None, 0
    for it in range(1, cfg.iterations + 1):
        t, x, target, w = draw_batch(rng, cfg.batch_size)
        loss, grad = net.loss_and_grad(t, x, target, w)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"{name}: non-finite loss at iteration {it}", np.array(trace)
            )
        if initial is None:
            initial = max(loss, 1e-12)
        above = above + 1 if loss > 10.0 * initial else 0
        if above >= 100:
            raise TrainingDiverged(
                f"{name}: loss above 10x initial ({initial:.3g}) for 100 steps at iteration {it}",
                np.array(trace),
            )
        opt.step(grad)
        if cfg.average_tail > 0 and it > avg_start:
            avg_n += 1
            if avg is None:
                avg = net.params.copy()
            else:
                avg += (net.params - avg) / avg_n
        acc += loss
        acc_n += 1
        if it % cfg.log_every == 0 or it == cfg.iterations:
            trace.append((it, acc / acc_n))
            acc, acc_n = 0.0, 0
    if avg is not None:
        net.params[...] = avg
    if opt.skipped:
        log.warning("%s: skipped %d non-finite updates", name, opt.skipped)
    net.skipped_updates = opt.skipped
    return np.array(trace)
