"""Guidance sets: deterministic predicates on R^d.

Structured sets use open intervals, so boundary points are excluded.
"""

import numpy as np


def _as_batch(y, dim):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1, 1)
    elif y.ndim == 1:
        y = y[:, None] if dim == 1 else y[None, :]
    return y


class GuidanceSet:
    dim = None

    def contains(self, y):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class Box(GuidanceSet):
    """Product of open intervals ``(lower_i, upper_i)``; infinite ends allowed."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(self.lower >= self.upper):
            raise ValueError("empty interval in box")
        self.dim = len(self.lower)

    @classmethod
    def interval(cls, lo=-np.inf, hi=np.inf):
        return cls([lo], [hi])

    @classmethod
    def halfspace(cls, dim, axis, c, above=True):
        lo = np.full(dim, -np.inf)
        hi = np.full(dim, np.inf)
        if above:
            lo[axis] = c
        else:
            hi[axis] = c
        return cls(lo, hi)

    @classmethod
    def everything(cls, dim):
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def is_everything(self):
        return bool(np.all(np.isinf(self.lower)) and np.all(np.isinf(self.upper)))

    @property
    def constrained_axes(self):
        return np.flatnonzero(np.isfinite(self.lower) | np.isfinite(self.upper))

    def contains(self, y):
        y = _as_batch(y, self.dim)
        return np.all((y > self.lower) & (y < self.upper), axis=1)

    def shifted(self, v):
        v = np.broadcast_to(np.asarray(v, dtype=float), self.lower.shape)
        return Box(self.lower + v, self.upper + v)

    def to_dict(self):
        enc = lambda a: [None if not np.isfinite(x) else float(x) for x in a]  # noqa: E731
        return {
            "type": "box",
            "lower": enc(self.lower),
            "upper": enc(self.upper),
        }

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


class LinearSet(GuidanceSet):
    """Event ``lo < w . y < hi`` for a fixed weight vector ``w``."""

    def __init__(self, w, lo=-np.inf, hi=np.inf):
        self.w = np.asarray(w, dtype=float).ravel()
        self.lo, self.hi = float(lo), float(hi)
        if not self.lo < self.hi:
            raise ValueError("empty target interval")
        self.dim = len(self.w)

    def value(self, y):
        return _as_batch(y, self.dim) @ self.w

    def contains(self, y):
        v = self.value(y)
        return (v > self.lo) & (v < self.hi)

    def to_dict(self):
        return {
            "type": "linear",
            "w": self.w.tolist(),
            "lo": None if np.isinf(self.lo) else self.lo,
            "hi": None if np.isinf(self.hi) else self.hi,
        }


class FunctionalSet(GuidanceSet):
    """Event ``F(y) in target`` where ``target`` is itself a guidance set."""

    def __init__(self, F, target, dim, name="F"):
        self.F = F
        self.target = target
        self.dim = int(dim)
        self.name = name

    def contains(self, y):
        return self.target.contains(np.asarray(self.F(_as_batch(y, self.dim))))

    def to_dict(self):
        return {"type": "functional", "name": self.name, "target": self.target.to_dict()}


def indicator(S, y):
    """1 where ``y`` lies in ``S``, else 0 (int array over the batch)."""
    return S.contains(y).astype(np.int8)


def set_from_dict(d):
    kind = d["type"]
    if kind == "box":
        lo = [(-np.inf if x is None else x) for x in d["lower"]]
        hi = [(np.inf if x is None else x) for x in d["upper"]]
        return Box(lo, hi)
    if kind == "linear":
        lo = -np.inf if d.get("lo") is None else d["lo"]
        hi = np.inf if d.get("hi") is None else d["hi"]
        return LinearSet(d["w"], lo, hi)
    raise ValueError(f"cannot rebuild guidance set of type {kind!r}")
