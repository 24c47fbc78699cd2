"""Vectorized interval arithmetic.

Every operation returns an enclosure of the true range, widened by a small
relative slack to absorb floating-point rounding (no directed rounding is
available from numpy).
"""

from __future__ import annotations

import numpy as np

SLACK = 1e-14


class IntervalDivisionError(ZeroDivisionError):
    """Divisor interval contains zero; the caller must split the box."""


def _pad(lo, hi, mag=None):
    if mag is None:
        mag = np.maximum(np.abs(lo), np.abs(hi))
    s = SLACK * mag + 1e-300
    return lo - s, hi + s


class Interval:
    __slots__ = ("lo", "hi")
    __array_priority__ = 100

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        if np.any(lo > hi):
            raise ValueError("interval lower bound exceeds upper bound")
        self.lo, self.hi = np.broadcast_arrays(lo, hi)

    @classmethod
    def point(cls, x) -> "Interval":
        return cls(x, x)

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def rad(self):
        return 0.5 * (self.hi - self.lo)

    @property
    def width(self):
        return self.hi - self.lo

    @property
    def shape(self):
        return self.lo.shape

    def __getitem__(self, idx) -> "Interval":
        return Interval(self.lo[idx], self.hi[idx])

    def __repr__(self):
        return f"Interval({self.lo!r}, {self.hi!r})"

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x)
        return (self.lo - tol <= x) & (x <= self.hi + tol)

    def intersect(self, other: "Interval") -> "Interval":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        # disjoint only through rounding; fall back to the wider enclosure
        bad = lo > hi
        if np.any(bad):
            lo = np.where(bad, np.minimum(self.lo, other.lo), lo)
            hi = np.where(bad, np.maximum(self.hi, other.hi), hi)
        return Interval(lo, hi)

    # arithmetic
    def __add__(self, o):
        o = as_interval(o)
        return Interval(*_pad(self.lo + o.lo, self.hi + o.hi))

    __radd__ = __add__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __sub__(self, o):
        o = as_interval(o)
        return Interval(*_pad(self.lo - o.hi, self.hi - o.lo))

    def __rsub__(self, o):
        return as_interval(o) - self

    def __mul__(self, o):
        if not isinstance(o, Interval):
            k = np.asarray(o, dtype=float)
            a, b = self.lo * k, self.hi * k
            return Interval(*_pad(np.minimum(a, b), np.maximum(a, b)))
        p = np.stack(np.broadcast_arrays(self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi))
        return Interval(*_pad(p.min(axis=0), p.max(axis=0)))

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = as_interval(o)
        if np.any((o.lo <= 0) & (o.hi >= 0)):
            raise IntervalDivisionError("divisor interval contains zero")
        return self * Interval(1.0 / o.hi, 1.0 / o.lo)

    def __rtruediv__(self, o):
        return as_interval(o) / self

    def square(self) -> "Interval":
        lo2, hi2 = self.lo * self.lo, self.hi * self.hi
        straddle = (self.lo <= 0) & (self.hi >= 0)
        lo = np.where(straddle, 0.0, np.minimum(lo2, hi2))
        hi = np.maximum(lo2, hi2)
        lo, hi = _pad(lo, hi)
        return Interval(np.maximum(lo, 0.0), hi)

    def __pow__(self, k):
        if k != 2:
            raise NotImplementedError("only squares are supported")
        return self.square()

    def sum(self, axis=None) -> "Interval":
        lo = self.lo.sum(axis=axis)
        hi = self.hi.sum(axis=axis)
        mag = np.maximum(np.abs(self.lo), np.abs(self.hi)).sum(axis=axis)
        return Interval(*_pad(lo, hi, mag))

    def __matmul__(self, M):
        """``x @ M`` for a point matrix ``M`` (midpoint-radius form)."""
        M = np.asarray(M, dtype=float)
        c = self.mid @ M
        r = self.rad @ np.abs(M)
        mag = np.abs(self.mid) @ np.abs(M) + r
        return Interval(*_pad(c - r, c + r, mag))

    def __rmatmul__(self, M):
        """``M @ x`` for a point matrix and an interval vector/matrix."""
        M = np.asarray(M, dtype=float)
        c = M @ self.mid
        r = np.abs(M) @ self.rad
        mag = np.abs(M) @ np.abs(self.mid) + r
        return Interval(*_pad(c - r, c + r, mag))

    def max0(self) -> "Interval":
        return Interval(np.maximum(self.lo, 0.0), np.maximum(self.hi, 0.0))


def as_interval(x) -> Interval:
    return x if isinstance(x, Interval) else Interval.point(x)


def itanh(x):
    if not isinstance(x, Interval):
        return np.tanh(x)
    return Interval(*_pad(np.tanh(x.lo), np.tanh(x.hi)))


def isqrt(x):
    if not isinstance(x, Interval):
        return np.sqrt(x)
    if np.any(x.hi < 0):
        raise ValueError("sqrt of a negative interval")
    lo, hi = _pad(np.sqrt(np.maximum(x.lo, 0.0)), np.sqrt(x.hi))
    return Interval(np.maximum(lo, 0.0), hi)


def dtanh_range(x: Interval) -> Interval:
    """Range of ``1 - tanh(s)^2`` over ``s`` in ``x``."""
    tl, th = np.tanh(np.abs(x.lo)), np.tanh(np.abs(x.hi))
    straddle = (x.lo <= 0) & (x.hi >= 0)
    near = np.where(straddle, 0.0, np.minimum(tl, th))
    far = np.maximum(tl, th)
    lo, hi = _pad(1.0 - far * far, 1.0 - near * near)
    return Interval(np.maximum(lo, 0.0), np.minimum(hi, 1.0))


def interval_forward(fn, box: Interval) -> Interval:
    """Natural interval extension: evaluate ``fn`` on interval arguments.

    ``fn`` is written with ordinary operators plus :func:`itanh`,
    :func:`isqrt` and ``.square()``; the same function evaluated on floats
    gives the point value.
    """
    return as_interval(fn(box))
