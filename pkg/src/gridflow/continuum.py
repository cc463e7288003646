"""Source-sink vector fields on pieces of R^3.

Every piece is written in its own local frame, where the source rectangle sits
in the plane x3 = 0 and fluid leaves it in the +x3 direction.  An
:class:`Isometry` (signed axis permutation plus translation) places the piece
in space.  Each piece knows its velocity field, its support, the closed-form
flow from the source, the inverse of that flow (``locate``), and the
source-to-sink map.

Axes are numbered 0, 1, 2 in code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

TOL = 1e-12


class GeometryError(ValueError):
    pass


class OverlapError(GeometryError):
    def __init__(self, i: int, j: int, depth: float):
        super().__init__(f"supports of pieces {i} and {j} overlap (inscribed depth {depth:.3e})")
        self.pair = (i, j)
        self.depth = depth


# ---------------------------------------------------------------- Lambert W

# 1/e split into a double and its rounding error
_EINV_HI = 0.36787944117144233
_EINV_LO = -1.2428753672788363e-17
# coefficients (k - 1) / k! of (d - 1) e^d + 1 = sum_k c_k d^k, k >= 2
_BRANCH_C = [(k - 1) / math.factorial(k) for k in range(2, 32)]
_BRANCH_S = 0.125


def _branch_gap(y):
    """e (y + 1/e) without cancellation."""
    return math.e * ((y + _EINV_HI) + _EINV_LO)


def _w_near_branch(s):
    """w = d - 1 where (d - 1) e^d + 1 = s, for 0 <= s <= _BRANCH_S.

    Near the branch point w e^w - y loses every digit to cancellation, so the
    residual is formed from the series in d = w + 1 instead; its derivative
    is d e^d in closed form.
    """
    s = np.asarray(s, dtype=float)
    q = np.sqrt(2.0 * np.maximum(s, 0.0))
    d = q - q * q / 3.0 + 11.0 / 72.0 * q ** 3
    for _ in range(8):
        acc = np.zeros_like(d)
        for c in reversed(_BRANCH_C):
            acc = acc * d + c
        h = acc * d * d
        dp = d * np.exp(d)
        step = np.divide(h - s, dp, out=np.zeros_like(d), where=dp > 0)
        d = d - step
        if np.all(np.abs(step) <= 1e-17 * np.abs(d)):
            break
    return d - 1.0


def lambert_w_principal(y: float) -> float:
    """Principal branch of w * exp(w) = y for y in (-1/e, 0)."""
    if not (-1.0 / math.e < y < 0.0):
        raise ValueError(f"y = {y!r} outside (-1/e, 0)")
    s = _branch_gap(y)
    if s <= _BRANCH_S:
        w = float(_w_near_branch(s))
        if -1.0 < w < 0.0:
            return w
        return _lambert_bisect(y)
    w = y * math.e
    for _ in range(60):
        ew = math.exp(w)
        f = w * ew - y
        if f == 0.0:
            return w
        wp1 = w + 1.0
        if wp1 <= 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_new = w - step
        if not (-1.0 < w_new < 0.0):
            break
        if abs(w_new - w) <= 1e-17 * max(1.0, abs(w)):
            return w_new
        w = w_new
    if abs(w * math.exp(w) - y) <= 1e-14 * abs(y) and -1.0 < w < 0.0:
        return w
    return _lambert_bisect(y)


def _lambert_bisect(y: float, iters: int = 200) -> float:
    lo, hi = -1.0, 0.0  # w e^w is increasing on (-1, 0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def lambert_w_array(y: np.ndarray) -> np.ndarray:
    """Vectorised principal branch on (-1/e, 0); scalar fallback where Halley stalls."""
    y = np.asarray(y, dtype=float)
    s = math.e * ((y + _EINV_HI) + _EINV_LO)
    near = s <= _BRANCH_S
    w = y * math.e
    far = ~near
    for _ in range(40):
        ew = np.exp(w)
        f = w * ew - y
        wp1 = np.maximum(w + 1.0, 1e-300)
        w_new = np.clip(w - f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1)), -1.0 + 1e-16, -1e-300)
        done = np.all(np.abs(w_new - w)[far] <= 4e-16 * np.abs(w)[far])
        w = w_new
        if done:
            break
    if near.any():
        w[near] = _w_near_branch(s[near])
    bad = (np.abs(w * np.exp(w) - y) > 1e-14 * np.abs(y)) | ~(w > -1.0)
    for i in np.flatnonzero(bad):
        w.flat[i] = lambert_w_principal(float(y.flat[i]))
    return w


def corner_rate(c: np.ndarray) -> np.ndarray:
    """s > 0 solving c (1 - e^{-s}) = s for c >= 1, with s = 0 at c = 1.

    s = W(-c e^{-c}) + c on the principal branch.  Near c = 1 the sum
    cancels, so a series start is used there; Newton polishing follows.
    """
    c = np.asarray(c, dtype=float)
    s = np.zeros_like(c)
    eps = c - 1.0
    # W is badly conditioned near the branch point, so below c = 1.5 start
    # from the series s = 2 eps - 2 eps^2 / 3 and let Newton finish
    small = eps < 0.5
    s[small] = 2 * eps[small] - (2.0 / 3.0) * eps[small] ** 2
    big = ~small
    if big.any():
        s[big] = lambert_w_array(-c[big] * np.exp(-c[big])) + c[big]
    pos = eps > 0
    for _ in range(12):
        g = c * -np.expm1(-s) - s
        dg = c * np.exp(-s) - 1.0
        ok = pos & (np.abs(dg) > 1e-300)
        step = np.where(ok, g / np.where(ok, dg, 1.0), 0.0)
        s = s - step
        if np.all(np.abs(step) <= 1e-16 * np.maximum(s, 1e-300)):
            break
    return np.where(pos, s, 0.0)


# ---------------------------------------------------------------- frames

@dataclass(frozen=True)
class Isometry:
    """x_global = A @ x_local + b with A a signed permutation matrix."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls) -> "Isometry":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def make(cls, cols: Sequence[Sequence[float]], b: Sequence[float]) -> "Isometry":
        """``cols[k]`` is the global image of local axis k."""
        A = np.array(cols, dtype=float).T
        if not np.allclose(np.abs(A).sum(axis=0), 1) or not np.allclose(np.abs(A).sum(axis=1), 1):
            raise GeometryError("frame columns must be signed unit axes")
        return cls(A, np.asarray(b, dtype=float))

    def to_global(self, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.b

    def to_local(self, x):
        return (np.asarray(x, dtype=float) - self.b) @ self.A

    def vec_global(self, v):
        return np.asarray(v, dtype=float) @ self.A.T

    def then(self, outer: "Isometry") -> "Isometry":
        """outer after self."""
        return Isometry(outer.A @ self.A, outer.A @ self.b + outer.b)

    def to_dict(self) -> dict:
        return {"A": self.A.astype(int).tolist(), "b": [float(v) for v in self.b]}


@dataclass(frozen=True)
class Rect2D:
    """Open rectangle in the plane x[axis] = offset.

    ``spans`` are the intervals on the two remaining axes in increasing axis
    order; ``sign`` is the direction of flow through the rectangle.
    """

    axis: int
    offset: float
    spans: tuple
    sign: int = 1

    def __post_init__(self):
        for lo, hi in self.spans:
            if not hi > lo:
                raise GeometryError(f"degenerate span ({lo}, {hi})")

    @property
    def others(self) -> tuple:
        return tuple(k for k in range(3) if k != self.axis)

    @property
    def area(self) -> float:
        (a, b), (c, d) = self.spans
        return (b - a) * (d - c)

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = self.sign
        return n

    def center(self) -> np.ndarray:
        x = np.zeros(3)
        x[self.axis] = self.offset
        for k, (lo, hi) in zip(self.others, self.spans):
            x[k] = 0.5 * (lo + hi)
        return x

    def corners(self) -> np.ndarray:
        out = []
        for u in self.spans[0]:
            for v in self.spans[1]:
                x = np.zeros(3)
                x[self.axis] = self.offset
                x[self.others[0]], x[self.others[1]] = u, v
                out.append(x)
        return np.array(out)

    def sample(self, rng: np.random.Generator, n: int, margin: float = 0.0) -> np.ndarray:
        x = np.empty((n, 3))
        x[:, self.axis] = self.offset
        for k, (lo, hi) in zip(self.others, self.spans):
            w = hi - lo
            x[:, k] = rng.uniform(lo + margin * w, hi - margin * w, n)
        return x

    def contains(self, x, tol: float = 1e-9) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        scale = max(1.0, max(abs(v) for s in self.spans for v in s))
        ok = np.abs(x[:, self.axis] - self.offset) <= tol * scale
        for k, (lo, hi) in zip(self.others, self.spans):
            ok &= (x[:, k] > lo - tol * scale) & (x[:, k] < hi + tol * scale)
        return ok

    def transformed(self, iso: Isometry) -> "Rect2D":
        cs = iso.to_global(self.corners())
        axis_vec = iso.vec_global(self.normal)
        axis = int(np.argmax(np.abs(axis_vec)))
        sign = int(round(axis_vec[axis]))
        others = [k for k in range(3) if k != axis]
        spans = tuple((float(cs[:, k].min()), float(cs[:, k].max())) for k in others)
        return Rect2D(axis, float(cs[0, axis]), spans, sign)

    def flipped(self) -> "Rect2D":
        return Rect2D(self.axis, self.offset, self.spans, -self.sign)

    def same_as(self, other: "Rect2D", tol: float = 1e-12) -> bool:
        if self.axis != other.axis or self.sign != other.sign:
            return False
        scale = max(1.0, abs(self.offset), *(abs(v) for s in self.spans for v in s))
        vals = [self.offset - other.offset]
        for s, t in zip(self.spans, other.spans):
            vals += [s[0] - t[0], s[1] - t[1]]
        return max(abs(v) for v in vals) <= tol * scale

    def to_dict(self) -> dict:
        return {"axis": self.axis, "offset": self.offset, "spans": [list(s) for s in self.spans], "sign": self.sign}


@dataclass(frozen=True)
class SourceSinkSpec:
    source: Rect2D
    sink: Rect2D
    speed_source: float
    speed_sink: float

    def __post_init__(self):
        fa = self.speed_source * self.source.area
        fb = self.speed_sink * self.sink.area
        if abs(fa - fb) > 1e-12 * max(abs(fa), abs(fb)):
            raise GeometryError(f"flux mismatch: {fa!r} in, {fb!r} out")

    @property
    def flux(self) -> float:
        return self.speed_source * self.source.area


@dataclass
class Polytope:
    """{x : A x <= b}, rows normalised to unit length."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def from_rows(cls, rows: Sequence[tuple]) -> "Polytope":
        A = np.array([r[0] for r in rows], dtype=float)
        b = np.array([r[1] for r in rows], dtype=float)
        n = np.linalg.norm(A, axis=1)
        return cls(A / n[:, None], b / n)

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        rows = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1
            rows += [(e, hi[k]), (-e, -lo[k])]
        return cls.from_rows(rows)

    def transformed(self, iso: Isometry) -> "Polytope":
        # A (R^T (y - b)) <= c
        A2 = self.A @ iso.A.T
        return Polytope(A2, self.b + A2 @ iso.b)


# ---------------------------------------------------------------- pieces

class Piece:
    """Base class.  Subclasses implement the ``_local`` hooks in their frame."""

    kind = "abstract"

    def __init__(self, iso: Optional[Isometry] = None, label: str = ""):
        self.iso = iso or Isometry.identity()
        self.label = label

    # local hooks
    def _vel(self, x, masked=True):
        raise NotImplementedError

    def _contains(self, x):
        raise NotImplementedError

    def _pos(self, z, t):
        raise NotImplementedError

    def _locate(self, x):
        raise NotImplementedError

    def _sink(self, z):
        raise NotImplementedError

    def _sink_inv(self, y):
        raise NotImplementedError

    def _polys(self) -> list:
        raise NotImplementedError

    def _phases(self) -> list:
        return [(lambda x: self._vel(x, masked=False), self.transit)]

    # global interface
    def placed(self, iso: Isometry) -> "Piece":
        """Same piece moved by ``iso`` (applied after the current frame)."""
        import copy
        p = copy.copy(self)
        p.iso = self.iso.then(iso)
        return p

    def velocity(self, x, masked: bool = True):
        xl = self.iso.to_local(np.atleast_2d(x))
        return self.iso.vec_global(self._vel(xl, masked))

    def contains(self, x):
        return self._contains(self.iso.to_local(np.atleast_2d(x)))

    def position(self, z, t):
        z = np.atleast_2d(z)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(z),))
        return self.iso.to_global(self._pos(self.iso.to_local(z), t))

    def locate(self, x):
        z, tau = self._locate(self.iso.to_local(np.atleast_2d(x)))
        return self.iso.to_global(z), tau

    def sink_map(self, z):
        return self.iso.to_global(self._sink(self.iso.to_local(np.atleast_2d(z))))

    def sink_inverse(self, y):
        return self.iso.to_global(self._sink_inv(self.iso.to_local(np.atleast_2d(y))))

    def _global_ends(self) -> tuple:
        # cached per (frame, spec); placed() swaps the frame, which invalidates it
        c = self.__dict__.get("_ends")
        if c is None or c[0] is not self.iso or c[1] is not self.spec_local:
            c = (self.iso, self.spec_local, self.spec_local.source.transformed(self.iso),
                 self.spec_local.sink.transformed(self.iso))
            self._ends = c
        return c

    @property
    def source(self) -> Rect2D:
        return self._global_ends()[2]

    @property
    def sink(self) -> Rect2D:
        return self._global_ends()[3]

    @property
    def speed_source(self) -> float:
        return self.spec_local.speed_source

    @property
    def speed_sink(self) -> float:
        return self.spec_local.speed_sink

    @property
    def flux(self) -> float:
        return self.spec_local.flux

    def polytopes(self) -> list:
        return [P.transformed(self.iso) for P in self._polys()]

    def bbox(self) -> tuple:
        lo, hi = self._bbox_local()
        cs = self.iso.to_global(np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1])
                                          for c in (lo[2], hi[2])]))
        return cs.min(axis=0), cs.max(axis=0)

    def phases(self) -> list:
        out = []
        for fn, dur in self._phases():
            out.append((lambda x, fn=fn: self.iso.vec_global(fn(self.iso.to_local(np.atleast_2d(x)))), dur))
        return out

    def sup_norm(self) -> float:
        raise NotImplementedError

    def volume(self) -> float:
        raise NotImplementedError

    def lp_power(self, p: float) -> tuple:
        """(value, exact) with value >= the integral of |u|^p over the support."""
        return self.sup_norm() ** p * self.volume(), False

    def describe(self) -> dict:
        lo, hi = self.bbox()
        return {"kind": self.kind, "label": self.label, "frame": self.iso.to_dict(),
                "params": self.params(), "support_bbox": [lo.tolist(), hi.tolist()],
                "transit": self.transit}

    def params(self) -> dict:
        return {}


class Parallel(Piece):
    """Constant field mu (D1/D3, D2/D3, 1) on the sheared prism over (0,a1)x(0,a2)."""

    kind = "constant"

    def __init__(self, a1, a2, D3, mu, D1=0.0, D2=0.0, iso=None, label=""):
        super().__init__(iso, label)
        if min(a1, a2, D3, mu) <= 0:
            raise GeometryError("parallel piece needs positive widths, length and speed")
        self.a1, self.a2, self.D1, self.D2, self.D3, self.mu = map(float, (a1, a2, D1, D2, D3, mu))
        self.u = self.mu * np.array([self.D1 / self.D3, self.D2 / self.D3, 1.0])
        self.transit = self.D3 / self.mu
        self.spec_local = SourceSinkSpec(
            Rect2D(2, 0.0, ((0.0, self.a1), (0.0, self.a2))),
            Rect2D(2, self.D3, ((self.D1, self.D1 + self.a1), (self.D2, self.D2 + self.a2))),
            self.mu, self.mu)

    def params(self):
        return dict(a1=self.a1, a2=self.a2, D1=self.D1, D2=self.D2, D3=self.D3, mu=self.mu)

    def _shift(self, x):
        r = x[:, 2] / self.D3
        return x[:, 0] - self.D1 * r, x[:, 1] - self.D2 * r

    def _contains(self, x):
        y1, y2 = self._shift(x)
        return (x[:, 2] > 0) & (x[:, 2] < self.D3) & (y1 > 0) & (y1 < self.a1) & (y2 > 0) & (y2 < self.a2)

    def _vel(self, x, masked=True):
        out = np.tile(self.u, (len(x), 1))
        if masked:
            out[~self._contains(x)] = 0
        return out

    def _pos(self, z, t):
        return z + t[:, None] * self.u

    def _locate(self, x):
        y1, y2 = self._shift(x)
        return np.column_stack([y1, y2, np.zeros(len(x))]), x[:, 2] / self.mu

    def _sink(self, z):
        return z + np.array([self.D1, self.D2, self.D3])

    def _sink_inv(self, y):
        return y - np.array([self.D1, self.D2, self.D3])

    def _polys(self):
        d = np.array([self.D1, self.D2, 0.0]) / self.D3
        rows = [([0, 0, 1], self.D3), ([0, 0, -1], 0.0)]
        for k, a in ((0, self.a1), (1, self.a2)):
            e = np.zeros(3)
            e[k] = 1
            e[2] = -d[k]
            rows += [(e, a), (-e, 0.0)]
        return [Polytope.from_rows(rows)]

    def _bbox_local(self):
        lo = np.array([min(0, self.D1), min(0, self.D2), 0.0])
        hi = np.array([max(self.a1, self.a1 + self.D1), max(self.a2, self.a2 + self.D2), self.D3])
        return lo, hi

    def sup_norm(self):
        return float(np.linalg.norm(self.u))

    def volume(self):
        return self.a1 * self.a2 * self.D3

    def lp_power(self, p):
        return self.sup_norm() ** p * self.volume(), True


class PipeWidth(Piece):
    """Width along local axis 0 changes linearly from a1 to b1 over length D3.

    The x0 = 0 wall is straight; streamlines keep the ratio x0 / width.
    """

    kind = "pipe_width"

    def __init__(self, a1, b1, a2, D3, muA, iso=None, label=""):
        super().__init__(iso, label)
        if min(a1, b1, a2, D3, muA) <= 0:
            raise GeometryError("degenerate pipe widths")
        self.a1, self.b1, self.a2, self.D3, self.muA = map(float, (a1, b1, a2, D3, muA))
        self.mu1 = self.muA * self.a1
        self.muB = self.mu1 / self.b1
        self.transit = self.D3 * (self.a1 + self.b1) / (2 * self.mu1)
        self.spec_local = SourceSinkSpec(
            Rect2D(2, 0.0, ((0.0, self.a1), (0.0, self.a2))),
            Rect2D(2, self.D3, ((0.0, self.b1), (0.0, self.a2))),
            self.muA, self.muB)

    def params(self):
        return dict(a1=self.a1, b1=self.b1, a2=self.a2, D3=self.D3, muA=self.muA)

    def _H(self, x3):
        return (self.D3 - x3) * self.a1 + x3 * self.b1

    def _contains(self, x):
        w = self._H(x[:, 2]) / self.D3
        return (x[:, 2] > 0) & (x[:, 2] < self.D3) & (x[:, 0] > 0) & (x[:, 0] < w) & (x[:, 1] > 0) & (x[:, 1] < self.a2)

    def _vel(self, x, masked=True):
        H = self._H(x[:, 2])
        out = np.zeros((len(x), 3))
        out[:, 0] = self.mu1 * self.D3 * x[:, 0] * (self.b1 - self.a1) / H ** 2
        out[:, 2] = self.mu1 * self.D3 / H
        if masked:
            out[~self._contains(x)] = 0
        return out

    def _phi(self, t):
        return 2 * self.mu1 * t / (self.a1 + np.sqrt(self.a1 ** 2 + 2 * (self.b1 - self.a1) * self.mu1 * t / self.D3))

    def _pos(self, z, t):
        phi = self._phi(t)
        out = z.copy()
        out[:, 0] = z[:, 0] / self.a1 * self._H(phi) / self.D3
        out[:, 2] = phi
        return out

    def _locate(self, x):
        x3 = x[:, 2]
        tau = (self.a1 * x3 + (self.b1 - self.a1) * x3 ** 2 / (2 * self.D3)) / self.mu1
        z = x.copy()
        z[:, 0] = x[:, 0] * self.a1 * self.D3 / self._H(x3)
        z[:, 2] = 0
        return z, tau

    def _sink(self, z):
        y = z.copy()
        y[:, 0] *= self.b1 / self.a1
        y[:, 2] = self.D3
        return y

    def _sink_inv(self, y):
        z = y.copy()
        z[:, 0] *= self.a1 / self.b1
        z[:, 2] = 0
        return z

    def _polys(self):
        # x0 * D3 <= a1 D3 + (b1 - a1) x3
        rows = [([0, 0, 1], self.D3), ([0, 0, -1], 0.0), ([-1, 0, 0], 0.0),
                ([self.D3, 0, -(self.b1 - self.a1)], self.a1 * self.D3),
                ([0, 1, 0], self.a2), ([0, -1, 0], 0.0)]
        return [Polytope.from_rows(rows)]

    def _bbox_local(self):
        return np.zeros(3), np.array([max(self.a1, self.b1), self.a2, self.D3])

    def sup_norm(self):
        return max(self.muA, self.muB) * (1 + abs(self.b1 - self.a1) / self.D3)

    def volume(self):
        return 0.5 * (self.a1 + self.b1) * self.a2 * self.D3

    def lp_power(self, p):
        # (1 + max(a1,b1)/D3)^p * max(muA^p a1, muB^p b1) * span * D3
        c = (1 + max(self.a1, self.b1) / self.D3) ** p
        return c * max(self.muA ** p * self.a1, self.muB ** p * self.b1) * self.a2 * self.D3, False

    def lp_power_quadrature(self, p, n: int = 400) -> float:
        """Gauss-Legendre value of the integral of |u|^p (for checks)."""
        g, w = np.polynomial.legendre.leggauss(n)
        x3 = 0.5 * self.D3 * (g + 1)
        w3 = 0.5 * self.D3 * w
        total = 0.0
        for t, wt in zip(x3, w3):
            H = self._H(t)
            width = H / self.D3
            x1 = 0.5 * width * (g + 1)
            u1 = self.mu1 * self.D3 * x1 * (self.b1 - self.a1) / H ** 2
            u3 = self.mu1 * self.D3 / H
            total += wt * 0.5 * width * np.dot(w, (u1 ** 2 + u3 ** 2) ** (p / 2))
        return total * self.a2


def _phi1(u):
    """(1 - e^{-u}) / u with the removable singularity filled in."""
    u = np.asarray(u, dtype=float)
    safe = np.where(np.abs(u) < 1e-300, 1.0, u)
    return np.where(np.abs(u) < 1e-300, 1.0, -np.expm1(-safe) / safe)


def _phi2(v):
    """-log(1 - v) / v, equal to 1 at v = 0."""
    v = np.asarray(v, dtype=float)
    safe = np.where((np.abs(v) < 1e-300) | (v >= 1), 0.5, v)
    return np.where(np.abs(v) < 1e-300, 1.0, -np.log1p(-safe) / safe)


class Corner(Piece):
    """Quarter turn from the source (0,a1)x(0,a2)x{0} to {L}x(0,a2)x(L-a1,L).

    On x0 + x2 < L the field is (0, F x1, mu - F x2) with F = F(x0) chosen so
    every streamline meets the diagonal at time L/mu.  The far half is the
    mirror image under R(x) = (L - x2, x1, L - x0) with time reversed.
    Streamlines spread along local axis 1 and come back by the sink.
    """

    kind = "corner_half"
    M = np.array([[0, 0, -1], [0, 1, 0], [-1, 0, 0]], dtype=float)

    def __init__(self, a1, a2, L, mu, iso=None, label=""):
        super().__init__(iso, label)
        if not L > a1:
            raise GeometryError(f"corner needs L > a1, got L={L}, a1={a1}")
        if min(a1, a2, mu) <= 0:
            raise GeometryError("degenerate corner")
        self.a1, self.a2, self.L, self.mu = map(float, (a1, a2, L, mu))
        self.tstar = self.L / self.mu
        self.transit = 2 * self.tstar
        self.s_max = float(corner_rate(np.array([self.L / (self.L - self.a1)]))[0])
        self.spec_local = SourceSinkSpec(
            Rect2D(2, 0.0, ((0.0, self.a1), (0.0, self.a2))),
            Rect2D(0, self.L, ((0.0, self.a2), (self.L - self.a1, self.L))),
            self.mu, self.mu)

    def params(self):
        return dict(a1=self.a1, a2=self.a2, L=self.L, mu=self.mu)

    def F(self, x1):
        x1 = np.clip(np.asarray(x1, dtype=float), 0.0, self.a1)
        # x0 is constant along streamlines of each half, so tracers repeat it
        key = getattr(self, "_fkey", None)
        if key is not None and key.shape == x1.shape and np.array_equal(key, x1):
            return self._fval
        val = corner_rate(self.L / (self.L - x1)) * self.mu / self.L
        self._fkey, self._fval = x1.copy(), val
        return val

    def _R(self, x):
        return np.column_stack([self.L - x[:, 2], x[:, 1], self.L - x[:, 0]])

    def _first(self, x):
        return x[:, 0] + x[:, 2] <= self.L

    def _u_first(self, w):
        F = self.F(w[:, 0])
        return np.column_stack([np.zeros(len(w)), F * w[:, 1], self.mu - F * w[:, 2]])

    def _u_second(self, x):
        return -self._u_first(self._R(x)) @ self.M.T

    def _vel(self, x, masked=True):
        first = self._first(x)
        out = np.where(first[:, None], self._u_first(x), self._u_second(x))
        if masked:
            out[~self._contains(x)] = 0
        return out

    def _contains_first(self, w):
        F = self.F(w[:, 0])
        z2 = w[:, 1] * (1 - F * w[:, 2] / self.mu)
        return ((w[:, 0] > 0) & (w[:, 0] < self.a1) & (w[:, 2] > 0) & (w[:, 0] + w[:, 2] <= self.L)
                & (z2 > 0) & (z2 < self.a2))

    def _contains(self, x):
        first = self._first(x)
        return np.where(first, self._contains_first(x), self._contains_first(self._R(x)))

    def _pos_first(self, z, t):
        F = self.F(z[:, 0])
        Ft = F * t
        return np.column_stack([z[:, 0], z[:, 1] * np.exp(Ft), self.mu * t * _phi1(Ft)])

    def _pos(self, z, t):
        first = t <= self.tstar
        a = self._pos_first(z, np.minimum(t, self.tstar))
        b = self._R(self._pos_first(z, np.clip(2 * self.tstar - t, 0, self.tstar)))
        return np.where(first[:, None], a, b)

    def _locate_first(self, w):
        F = self.F(w[:, 0])
        v = F * w[:, 2] / self.mu
        tau = w[:, 2] / self.mu * _phi2(v)
        z = np.column_stack([w[:, 0], w[:, 1] * (1 - v), np.zeros(len(w))])
        return z, tau

    def _locate(self, x):
        first = self._first(x)
        z1, t1 = self._locate_first(x)
        z2, t2 = self._locate_first(self._R(x))
        return np.where(first[:, None], z1, z2), np.where(first, t1, 2 * self.tstar - t2)

    def _sink(self, z):
        return np.column_stack([np.full(len(z), self.L), z[:, 1], self.L - z[:, 0]])

    def _sink_inv(self, y):
        return np.column_stack([self.L - y[:, 2], y[:, 1], np.zeros(len(y))])

    def spread(self) -> float:
        """Largest extent reached along local axis 1."""
        return self.a2 * math.exp(self.s_max)

    def _polys(self):
        top = self.spread()
        first = [([1, 0, 0], self.a1), ([-1, 0, 0], 0.0), ([0, 0, -1], 0.0), ([1, 0, 1], self.L),
                 ([0, 1, 0], top), ([0, -1, 0], 0.0)]
        second = [([0, 0, -1], self.a1 - self.L), ([0, 0, 1], self.L), ([1, 0, 0], self.L),
                  ([-1, 0, -1], -self.L), ([0, 1, 0], top), ([0, -1, 0], 0.0)]
        return [Polytope.from_rows(first), Polytope.from_rows(second)]

    def _bbox_local(self):
        return np.zeros(3), np.array([self.L, self.spread(), self.L])

    def sup_norm(self):
        return self.mu * (1 + self.a2 / self.L * math.exp(2 * self.L / (self.L - self.a1)))

    def volume(self):
        return 2 * (self.a1 * self.L - 0.5 * self.a1 ** 2) * self.spread()

    def _phases(self):
        return [(self._u_first, self.tstar), (self._u_second, self.tstar)]


class Rotation(Piece):
    """mu (-w x1, w x0, 1) with w = theta / D3: lift by D3 while turning by theta.

    The source rectangle may contain the axis.  ``theta`` must be a multiple
    of pi/2 so the sink is again an axis-parallel rectangle.
    """

    kind = "rotation"

    def __init__(self, spans, D3, mu, theta=math.pi / 2, iso=None, label=""):
        super().__init__(iso, label)
        k = theta / (math.pi / 2)
        if abs(k - round(k)) > 1e-12:
            raise GeometryError("rotation angle must be a multiple of pi/2")
        self.spans = tuple((float(a), float(b)) for a, b in spans)
        self.D3, self.mu, self.theta = float(D3), float(mu), float(theta)
        self.omega = self.theta / self.D3
        self.transit = self.D3 / self.mu
        src = Rect2D(2, 0.0, self.spans)
        c = np.round(self._rot(src.corners(), np.full(4, self.theta)), 14) + 0.0
        sink = Rect2D(2, self.D3, ((c[:, 0].min(), c[:, 0].max()), (c[:, 1].min(), c[:, 1].max())))
        self.spec_local = SourceSinkSpec(src, sink, self.mu, self.mu)
        self.r = float(np.max(np.linalg.norm(src.corners()[:, :2], axis=1)))

    def params(self):
        return dict(spans=[list(s) for s in self.spans], D3=self.D3, mu=self.mu, theta=self.theta)

    @staticmethod
    def _rot(x, ang):
        c, s = np.cos(ang), np.sin(ang)
        out = np.array(x, dtype=float, copy=True)
        out[:, 0] = c * x[:, 0] - s * x[:, 1]
        out[:, 1] = s * x[:, 0] + c * x[:, 1]
        return out

    def _contains(self, x):
        back = self._rot(x, -self.omega * x[:, 2])
        (a, b), (c, d) = self.spans
        return ((x[:, 2] > 0) & (x[:, 2] < self.D3) & (back[:, 0] > a) & (back[:, 0] < b)
                & (back[:, 1] > c) & (back[:, 1] < d))

    def _vel(self, x, masked=True):
        out = self.mu * np.column_stack([-self.omega * x[:, 1], self.omega * x[:, 0], np.ones(len(x))])
        if masked:
            out[~self._contains(x)] = 0
        return out

    def _pos(self, z, t):
        out = self._rot(z, self.omega * self.mu * t)
        out[:, 2] = self.mu * t
        return out

    def _locate(self, x):
        z = self._rot(x, -self.omega * x[:, 2])
        z[:, 2] = 0
        return z, x[:, 2] / self.mu

    def _sink(self, z):
        y = self._rot(z, np.full(len(z), self.theta))
        y[:, 2] = self.D3
        return np.round(y, 15)

    def _sink_inv(self, y):
        z = self._rot(y, np.full(len(y), -self.theta))
        z[:, 2] = 0
        return z

    def _polys(self):
        return [Polytope.box([-self.r, -self.r, 0], [self.r, self.r, self.D3])]

    def _bbox_local(self):
        return np.array([-self.r, -self.r, 0]), np.array([self.r, self.r, self.D3])

    def sup_norm(self):
        return self.mu * (1 + abs(self.omega) * self.r)

    def volume(self):
        return self.spec_local.source.area * self.D3


class CubeFlow(Piece):
    """Snake pattern through the cube [0,l]^3 fed by a gate on its x0 = l face.

    The gate box is (l, l + lam/2) x (l/2 - lam/2, l/2 + lam/2) x (0, l) with
    lam = l / kappa.  Fluid enters through the gate's lower face G_in moving
    +x1, runs through every point of the cube at speed mu0 and leaves through
    the upper face G_out; the source-to-sink map is the shift by lam e1.
    Streamlines are labelled by a = z0 - l in (0, lam/2) and by arc length
    from G_in, which equals mu0 times the elapsed time.
    """

    kind = "snake_cell"

    def __init__(self, l, kappa, mu0, iso=None, label=""):
        super().__init__(iso, label)
        if kappa < 1 or int(kappa) != kappa:
            raise GeometryError("kappa must be a positive integer")
        self.l, self.kappa, self.mu0 = float(l), int(kappa), float(mu0)
        self.lam = self.l / self.kappa
        self.loop = 2 * self.l * self.kappa + self.lam
        self.transit = self.loop / self.mu0
        l, lam = self.l, self.lam
        self.spec_local = SourceSinkSpec(
            Rect2D(1, l / 2 - lam / 2, ((l, l + lam / 2), (0.0, l))),
            Rect2D(1, l / 2 + lam / 2, ((l, l + lam / 2), (0.0, l))),
            self.mu0, self.mu0)

    def params(self):
        return dict(l=self.l, kappa=self.kappa, mu0=self.mu0)

    # geometry of one half -------------------------------------------------
    def half_length(self, d):
        return self.kappa * self.l - self.lam / 2 + 2 * d

    def _upper_point(self, u, d):
        l, lam, k = self.l, self.lam, self.kappa
        s = lam / 2 - d
        A = l / 2 - lam / 2
        x1 = np.empty_like(u)
        x2 = np.empty_like(u)
        col0 = u < l / 2 - s
        x1[col0] = s[col0]
        x2[col0] = l / 2 + u[col0]
        r = u - (l / 2 - s)
        m = np.clip(np.floor(r / l), 0, k - 1)
        q = r - m * l
        top = ~col0 & (q < 2 * d)
        down = ~col0 & ~top & (q < 2 * d + A)
        mid = ~col0 & ~top & ~down & (q < A + lam)
        up = ~col0 & ~top & ~down & ~mid
        x1[top] = (m * lam + s + q)[top]
        x2[top] = (l - s)[top]
        x1[down] = (m * lam + lam / 2 + d)[down]
        x2[down] = (l - s - (q - 2 * d))[down]
        x1[mid] = (m * lam + lam / 2 + d + (q - 2 * d - A))[mid]
        x2[mid] = (l / 2 + d)[mid]
        x1[up] = ((m + 1) * lam + s)[up]
        x2[up] = (l / 2 + d + (q - A - lam))[up]
        return x1, x2

    def _upper_arc(self, x1, x2):
        """(d, arc within the upper half) for cube points with x2 > l/2."""
        l, lam, k = self.l, self.lam, self.kappa
        A = l / 2 - lam / 2
        j1 = np.clip(np.floor(x1 / lam), 0, k - 1)
        in1 = (x1 + x2 > l + j1 * lam) & (x2 - x1 > l - (j1 + 1) * lam)
        j2 = np.clip(np.floor(x1 / lam + 0.5), 1, k)
        in2 = ~in1 & (x1 + x2 < l / 2 + lam / 2 + j2 * lam) & (x2 - x1 < l / 2 - lam / 2 - (j2 - 1) * lam)
        c = np.clip(np.floor(x1 / (lam / 2)), 0, 2 * k - 1)
        col = ~in1 & ~in2
        d = np.empty_like(x1)
        u = np.empty_like(x1)
        # top triangles
        s = l - x2
        dd = lam / 2 - s
        u1 = (l / 2 - s) + j1 * l + (x1 - (j1 * lam + s))
        d[in1], u[in1] = dd[in1], u1[in1]
        # middle triangles
        m = j2 - 1
        dd = x2 - l / 2
        s = lam / 2 - dd
        u2 = (l / 2 - s) + m * l + 2 * dd + A + (x1 - (m * lam + lam / 2 + dd))
        d[in2], u[in2] = dd[in2], u2[in2]
        # columns
        odd = col & (c % 2 == 1)
        m = (c - 1) // 2
        dd = x1 - m * lam - lam / 2
        s = lam / 2 - dd
        u3 = (l / 2 - s) + m * l + 2 * dd + (l - s - x2)
        d[odd], u[odd] = dd[odd], u3[odd]
        ev = col & (c % 2 == 0) & (c > 0)
        m = c // 2 - 1
        s = x1 - (m + 1) * lam
        dd = lam / 2 - s
        u4 = (l / 2 - s) + m * l + A + lam + (x2 - l / 2 - dd)
        d[ev], u[ev] = dd[ev], u4[ev]
        c0 = col & (c == 0)
        d[c0] = (lam / 2 - x1)[c0]
        u[c0] = (x2 - l / 2)[c0]
        return d, u

    def point_of(self, a, arc):
        """(x0, x1) on streamline ``a`` at arc length ``arc`` from G_in."""
        l, lam = self.l, self.lam
        a = np.asarray(a, dtype=float)
        arc = np.asarray(arc, dtype=float)
        d = lam / 2 - a
        Lh = self.half_length(d)
        E = 2 * a + 2 * Lh
        x1 = np.empty_like(arc)
        x2 = np.empty_like(arc)
        g1 = arc < a
        g2 = ~g1 & (arc < 2 * a)
        lo = ~g1 & ~g2 & (arc < 2 * a + Lh)
        hi = ~g1 & ~g2 & ~lo & (arc < E)
        g3 = ~g1 & ~g2 & ~lo & ~hi & (arc < E + a)
        g4 = ~g1 & ~g2 & ~lo & ~hi & ~g3
        x1[g1] = (l + a)[g1]
        x2[g1] = (l / 2 - lam / 2 + arc)[g1]
        x1[g2] = (l + a - (arc - a))[g2]
        x2[g2] = (l / 2 - d)[g2]
        if lo.any():
            p1, p2 = self._upper_point((Lh - (arc - 2 * a))[lo], d[lo])
            x1[lo], x2[lo] = p1, l - p2
        if hi.any():
            p1, p2 = self._upper_point((arc - 2 * a - Lh)[hi], d[hi])
            x1[hi], x2[hi] = p1, p2
        x1[g3] = (l + (arc - E))[g3]
        x2[g3] = (l / 2 + d)[g3]
        x1[g4] = (l + a)[g4]
        x2[g4] = (l / 2 + d + (arc - E - a))[g4]
        return x1, x2

    def arc_of(self, x1, x2):
        """Inverse of :meth:`point_of` for points of the cube or the gate."""
        l, lam = self.l, self.lam
        a = np.empty_like(x1)
        arc = np.empty_like(x1)
        cube = x1 <= l
        upper = x2 > l / 2
        cu = cube & upper
        if cu.any():
            d, u = self._upper_arc(x1[cu], x2[cu])
            a[cu] = lam / 2 - d
            arc[cu] = 2 * a[cu] + self.half_length(d) + u
        cl = cube & ~upper
        if cl.any():
            d, u = self._upper_arc(x1[cl], l - x2[cl])
            a[cl] = lam / 2 - d
            arc[cl] = 2 * a[cl] + self.half_length(d) - u
        g = ~cube
        b6 = g & ~upper & (x1 - x2 < l / 2 + lam / 2)
        b5 = g & upper & (x1 + x2 < 1.5 * l + lam / 2)
        vl = g & ~upper & ~b6
        vu = g & upper & ~b5
        aa = x2 - (l / 2 - lam / 2)
        a[b6], arc[b6] = aa[b6], (aa + (l + aa - x1))[b6]
        dd = x2 - l / 2
        aa = lam / 2 - dd
        a[b5], arc[b5] = aa[b5], (2 * aa + 2 * self.half_length(dd) + (x1 - l))[b5]
        aa = x1 - l
        a[vl], arc[vl] = aa[vl], (x2 - (l / 2 - lam / 2))[vl]
        dd = lam / 2 - aa
        a[vu] = aa[vu]
        arc[vu] = (3 * aa + 2 * self.half_length(dd) + (x2 - (l / 2 + dd)))[vu]
        return a, arc

    # field ------------------------------------------------------------------
    def _in_B1(self, x1, x2):
        """Upper-half cells moving +x0 (top and middle triangles)."""
        l, lam, k = self.l, self.lam, self.kappa
        j1 = np.clip(np.floor(x1 / lam), 0, k - 1)
        in1 = (x2 < l) & (x1 + x2 > l + j1 * lam) & (x2 - x1 > l - (j1 + 1) * lam)
        j2 = np.clip(np.floor(x1 / lam + 0.5), 1, k)
        in2 = (x1 + x2 < l / 2 + lam / 2 + j2 * lam) & (x2 - x1 < l / 2 - lam / 2 - (j2 - 1) * lam)
        return (x2 > l / 2) & (in1 | in2)

    def _vel(self, x, masked=True):
        l, lam, mu = self.l, self.lam, self.mu0
        x1, x2 = x[:, 0], x[:, 1]
        out = np.zeros((len(x), 3))
        cube = x1 <= l
        b1 = cube & self._in_B1(x1, x2)
        b2 = cube & self._in_B1(x1, l - x2)
        b3 = cube & ~b1 & ~b2 & (np.mod(x1, lam) < lam / 2)
        b4 = cube & ~b1 & ~b2 & ~b3
        out[b1, 0] = mu
        out[b2, 0] = -mu
        out[b3, 1] = mu
        out[b4, 1] = -mu
        g = ~cube
        b5 = g & (x2 > l / 2) & (x1 + x2 < 1.5 * l + lam / 2)
        b6 = g & (x2 < l / 2) & (x1 - x2 < l / 2 + lam / 2)
        out[b5, 0] = mu
        out[b6, 0] = -mu
        out[g & ~b5 & ~b6, 1] = mu
        if masked:
            out[~self._contains(x)] = 0
        return out

    def _contains(self, x):
        l, lam = self.l, self.lam
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        zok = (x3 > 0) & (x3 < l)
        cube = (x1 > 0) & (x1 <= l) & (x2 > 0) & (x2 < l)
        gate = (x1 > l) & (x1 < l + lam / 2) & (np.abs(x2 - l / 2) < lam / 2)
        return zok & (cube | gate)

    def in_gate(self, x):
        x = self.iso.to_local(np.atleast_2d(x))
        l, lam = self.l, self.lam
        return ((x[:, 0] > l) & (x[:, 0] < l + lam / 2) & (np.abs(x[:, 1] - l / 2) < lam / 2)
                & (x[:, 2] > 0) & (x[:, 2] < l))

    def _pos(self, z, t):
        a = z[:, 0] - self.l
        x1, x2 = self.point_of(a, self.mu0 * t)
        return np.column_stack([x1, x2, z[:, 2]])

    def _locate(self, x):
        a, arc = self.arc_of(x[:, 0], x[:, 1])
        z = np.column_stack([self.l + a, np.full(len(x), self.l / 2 - self.lam / 2), x[:, 2]])
        return z, arc / self.mu0

    def _sink(self, z):
        return z + np.array([0.0, self.lam, 0.0])

    def _sink_inv(self, y):
        return y - np.array([0.0, self.lam, 0.0])

    def _polys(self):
        l, lam = self.l, self.lam
        return [Polytope.box([0, 0, 0], [l, l, l]),
                Polytope.box([l, l / 2 - lam / 2, 0], [l + lam / 2, l / 2 + lam / 2, l])]

    def _bbox_local(self):
        return np.zeros(3), np.array([self.l + self.lam / 2, self.l, self.l])

    def _phases(self):
        raise NotImplementedError("the snake field is piecewise constant; use position()")

    def sup_norm(self):
        return self.mu0

    def volume(self):
        return self.l ** 3 + self.lam ** 2 * self.l / 2

    def lp_power(self, p):
        return self.mu0 ** p * self.volume(), True


class Reversed(Piece):
    """The same support with the velocity negated: sink and source swap roles."""

    def __init__(self, inner: Piece, label=""):
        super().__init__(None, label or inner.label)
        self.inner = inner
        self.kind = inner.kind
        self.transit = inner.transit
        self.spec_local = SourceSinkSpec(inner.sink.flipped(), inner.source.flipped(),
                                         inner.speed_sink, inner.speed_source)

    def params(self):
        return {"reversed": True, **self.inner.params()}

    @property
    def source(self):
        return self.spec_local.source

    @property
    def sink(self):
        return self.spec_local.sink

    def velocity(self, x, masked=True):
        return -self.inner.velocity(x, masked)

    def contains(self, x):
        return self.inner.contains(x)

    def position(self, z, t):
        z = np.atleast_2d(z)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(z),))
        return self.inner.position(self.inner.sink_inverse(z), self.transit - t)

    def locate(self, x):
        z0, t0 = self.inner.locate(x)
        return self.inner.sink_map(z0), self.transit - t0

    def sink_map(self, z):
        return self.inner.sink_inverse(z)

    def sink_inverse(self, y):
        return self.inner.sink_map(y)

    def polytopes(self):
        return self.inner.polytopes()

    def bbox(self):
        return self.inner.bbox()

    def phases(self):
        return [(lambda x, fn=fn: -fn(x), dur) for fn, dur in reversed(self.inner.phases())]

    def placed(self, iso):
        return Reversed(self.inner.placed(iso), self.label)

    def sup_norm(self):
        return self.inner.sup_norm()

    def volume(self):
        return self.inner.volume()

    def lp_power(self, p):
        return self.inner.lp_power(p)

    def describe(self):
        d = self.inner.describe()
        d["params"] = self.params()
        return d


class TimeScaled(Piece):
    """Velocity multiplied by ``c``: same streamlines, traversed c times faster."""

    def __init__(self, inner: Piece, c: float, label=""):
        super().__init__(None, label or inner.label)
        if c <= 0:
            raise GeometryError("time scale must be positive")
        self.inner, self.c = inner, float(c)
        self.kind = inner.kind
        self.transit = inner.transit / self.c
        self.spec_local = SourceSinkSpec(inner.source, inner.sink, inner.speed_source * c, inner.speed_sink * c)

    def params(self):
        return {"time_scale": self.c, **self.inner.params()}

    @property
    def source(self):
        return self.spec_local.source

    @property
    def sink(self):
        return self.spec_local.sink

    def velocity(self, x, masked=True):
        return self.c * self.inner.velocity(x, masked)

    def contains(self, x):
        return self.inner.contains(x)

    def position(self, z, t):
        return self.inner.position(z, self.c * np.asarray(t, dtype=float))

    def locate(self, x):
        z, t = self.inner.locate(x)
        return z, t / self.c

    def sink_map(self, z):
        return self.inner.sink_map(z)

    def sink_inverse(self, y):
        return self.inner.sink_inverse(y)

    def polytopes(self):
        return self.inner.polytopes()

    def bbox(self):
        return self.inner.bbox()

    def phases(self):
        return [(lambda x, fn=fn: self.c * fn(x), dur / self.c) for fn, dur in self.inner.phases()]

    def placed(self, iso):
        return TimeScaled(self.inner.placed(iso), self.c, self.label)

    def sup_norm(self):
        return self.c * self.inner.sup_norm()

    def volume(self):
        return self.inner.volume()

    def lp_power(self, p):
        v, exact = self.inner.lp_power(p)
        return self.c ** p * v, exact

    def describe(self):
        d = self.inner.describe()
        d["params"] = self.params()
        d["transit"] = self.transit
        return d


# ---------------------------------------------------------------- constructors

def _frame_for(src: Rect2D) -> tuple:
    """Local axes (global images) for a piece whose source is ``src``."""
    n = np.zeros(3)
    n[src.axis] = src.sign
    e0 = np.zeros(3)
    e0[src.others[0]] = 1
    e1 = np.zeros(3)
    e1[src.others[1]] = 1
    b = np.zeros(3)
    b[src.axis] = src.offset
    b[src.others[0]] = src.spans[0][0]
    b[src.others[1]] = src.spans[1][0]
    return e0, e1, n, b


def parallel_field(A: Rect2D, B: Rect2D, mu: float, label="") -> Parallel:
    """Constant field carrying A onto the translate B."""
    if A.axis != B.axis or A.sign != B.sign:
        raise GeometryError("source and sink must be parallel with the same flow direction")
    wa = [s[1] - s[0] for s in A.spans]
    wb = [s[1] - s[0] for s in B.spans]
    if any(abs(x - y) > 1e-12 * max(1.0, abs(x)) for x, y in zip(wa, wb)):
        raise GeometryError("parallel pieces need congruent source and sink")
    D3 = (B.offset - A.offset) * A.sign
    if D3 <= 0:
        raise GeometryError("sink must lie downstream of the source")
    e0, e1, n, b = _frame_for(A)
    D1 = B.spans[0][0] - A.spans[0][0]
    D2 = B.spans[1][0] - A.spans[1][0]
    return Parallel(wa[0], wa[1], D3, mu, D1, D2, Isometry.make([e0, e1, n], b), label)


def pipe_width_field(A: Rect2D, B: Rect2D, muA: float, label="") -> PipeWidth:
    """Change of width along one axis; the other span and one wall stay fixed."""
    if A.axis != B.axis or A.sign != B.sign:
        raise GeometryError("source and sink must be parallel with the same flow direction")
    D3 = (B.offset - A.offset) * A.sign
    if D3 <= 0:
        raise GeometryError("sink must lie downstream of the source")
    same = [abs(a[0] - b[0]) <= 1e-12 and abs(a[1] - b[1]) <= 1e-12 for a, b in zip(A.spans, B.spans)]
    if all(same):
        k = 0
    elif same[1]:
        k = 0
    elif same[0]:
        k = 1
    else:
        raise GeometryError("pipe pieces change one width at a time")
    keep = 1 - k
    (alo, ahi), (blo, bhi) = A.spans[k], B.spans[k]
    ax = A.others[k]
    e_w = np.zeros(3)
    e_s = np.zeros(3)
    e_s[A.others[keep]] = 1
    n = np.zeros(3)
    n[A.axis] = A.sign
    b = np.zeros(3)
    b[A.axis] = A.offset
    b[A.others[keep]] = A.spans[keep][0]
    if abs(alo - blo) <= 1e-12:
        e_w[ax] = 1
        b[ax] = alo
    elif abs(ahi - bhi) <= 1e-12:
        e_w[ax] = -1
        b[ax] = ahi
    else:
        raise GeometryError("pipe pieces keep one wall fixed")
    iso = Isometry.make([e_w, e_s, n], b)
    return PipeWidth(ahi - alo, bhi - blo, A.spans[keep][1] - A.spans[keep][0], D3, muA, iso, label)


def corner_field(a1, a2, L, mu, iso=None, label="") -> Corner:
    return Corner(a1, a2, L, mu, iso, label)


def rotation_field(A: Rect2D, mu0: float, r: float = None, D3: float = 1.0, theta=math.pi / 2,
                   center=(0.0, 0.0), label="") -> Rotation:
    """Twist about the line through ``center`` normal to A."""
    e0, e1, n, _ = _frame_for(A)
    b = np.zeros(3)
    b[A.axis] = A.offset
    b[A.others[0]], b[A.others[1]] = center
    spans = tuple((lo - c, hi - c) for (lo, hi), c in zip(A.spans, center))
    rot = Rotation(spans, D3, mu0, theta, Isometry.make([e0, e1, n], b), label)
    if r is not None and rot.r > r * (1 + 1e-12):
        raise GeometryError(f"source rectangle leaves the disk of radius {r}")
    return rot


def gate_shortcut(cube: CubeFlow, speed: float, label="shortcut") -> Parallel:
    """Straight field -speed e1 on the gate box: G_out back to G_in."""
    l, lam = cube.l, cube.lam
    src = Rect2D(1, l / 2 + lam / 2, ((l, l + lam / 2), (0.0, l)), -1).transformed(cube.iso)
    snk = Rect2D(1, l / 2 - lam / 2, ((l, l + lam / 2), (0.0, l)), -1).transformed(cube.iso)
    p = parallel_field(src, snk, speed, label)
    p.kind = "gate_cell"
    return p


# ---------------------------------------------------------------- composites

def _check_link(p: Piece, q: Piece, i: int) -> None:
    if not p.sink.same_as(q.source):
        raise GeometryError(f"checkpoint {i}: sink {p.sink} does not match next source {q.source}")
    a, b = p.speed_sink, q.speed_source
    if abs(a - b) > 1e-12 * max(a, b):
        raise GeometryError(f"checkpoint {i}: speed {a!r} out, {b!r} in (flux mismatch)")


class Chain:
    """Pieces glued sink-to-source; behaves like one source-sink flow."""

    def __init__(self, pieces: Sequence[Piece], label: str = ""):
        pieces = list(pieces)
        if not pieces:
            raise GeometryError("empty chain")
        flat = []
        for p in pieces:
            flat.extend(p.pieces if isinstance(p, Chain) else [p])
        for i in range(len(flat) - 1):
            _check_link(flat[i], flat[i + 1], i)
        self.pieces = flat
        self.label = label
        self.times = np.cumsum([0.0] + [p.transit for p in flat])
        self.transit = float(self.times[-1])

    @property
    def source(self):
        return self.pieces[0].source

    @property
    def sink(self):
        return self.pieces[-1].sink

    @property
    def speed_source(self):
        return self.pieces[0].speed_source

    @property
    def speed_sink(self):
        return self.pieces[-1].speed_sink

    def sink_map(self, z):
        for p in self.pieces:
            z = p.sink_map(z)
        return z

    def sink_inverse(self, y):
        for p in reversed(self.pieces):
            y = p.sink_inverse(y)
        return y

    def position(self, z, t):
        z = np.atleast_2d(np.asarray(z, dtype=float)).copy()
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(z),)).copy()
        out = np.empty_like(z)
        done = np.zeros(len(z), bool)
        for k, p in enumerate(self.pieces):
            last = k == len(self.pieces) - 1
            here = ~done & ((t <= p.transit) | last)
            if here.any():
                out[here] = p.position(z[here], t[here])
                done |= here
            rest = ~done
            if not rest.any():
                break
            z[rest] = p.sink_map(z[rest])
            t[rest] -= p.transit
        return out

    def locate(self, x):
        x = np.atleast_2d(x)
        z = np.full_like(x, np.nan)
        tau = np.full(len(x), np.nan)
        for k, p in enumerate(self.pieces):
            m = np.isnan(tau) & p.contains(x)
            if m.any():
                zz, tt = p.locate(x[m])
                for q in reversed(self.pieces[:k]):
                    zz = q.sink_inverse(zz)
                z[m], tau[m] = zz, tt + self.times[k]
        return z, tau


def concat(pieces: Sequence[Piece], label: str = "") -> Chain:
    return Chain(pieces, label)


class PiecewiseField:
    """A union of pieces with interior-disjoint supports.

    Pieces are linked wherever one sink coincides with another source, which
    lets :meth:`flow` carry points across checkpoints.
    """

    def __init__(self, pieces: Sequence[Piece], window=(0.0, 1.0)):
        self.pieces = list(pieces)
        self.window = tuple(window)
        self.succ = self._link()
        self._index = None

    def _link(self) -> np.ndarray:
        key = {}
        for i, p in enumerate(self.pieces):
            key.setdefault(self._rkey(p.source), []).append(i)
        succ = np.full(len(self.pieces), -1)
        for i, p in enumerate(self.pieces):
            a, s, k = self._rkey(p.sink)
            cands = key.get((a, s, k - 1), []) + key.get((a, s, k), []) + key.get((a, s, k + 1), [])
            for j in cands:
                if p.sink.same_as(self.pieces[j].source, 1e-9):
                    succ[i] = j
                    break
        return succ

    @staticmethod
    def _rkey(r: Rect2D):
        # bucket by plane; neighbouring buckets are searched too
        return (r.axis, r.sign, int(math.floor(r.offset * 1e6)))

    def flux_report(self) -> dict:
        worst = 0.0
        for i, j in enumerate(self.succ):
            if j >= 0:
                a, b = self.pieces[i].speed_sink, self.pieces[j].speed_source
                worst = max(worst, abs(a - b) / max(a, b))
        return {"checkpoints": int((self.succ >= 0).sum()), "max_rel_flux_mismatch": worst}

    # spatial index over bounding boxes
    def _build_index(self):
        boxes = [p.bbox() for p in self.pieces]
        lo = np.array([b[0] for b in boxes])
        hi = np.array([b[1] for b in boxes])
        ext = np.median(hi - lo, axis=0).max()
        h = max(ext, 1e-9)
        cells = {}
        for i, (a, b) in enumerate(zip(lo, hi)):
            ia = np.floor(a / h).astype(int)
            ib = np.floor(b / h).astype(int)
            if np.prod(ib - ia + 1) > 4096:
                cells.setdefault("big", []).append(i)
                continue
            for c in np.ndindex(*(ib - ia + 1)):
                cells.setdefault(tuple(ia + np.array(c)), []).append(i)
        self._index = (h, cells, lo, hi)

    def which(self, x) -> np.ndarray:
        """Index of the piece whose support holds each point, -1 if none."""
        if not self.pieces:
            return np.full(len(np.atleast_2d(x)), -1)
        if self._index is None:
            self._build_index()
        h, cells, lo, hi = self._index
        x = np.atleast_2d(x)
        out = np.full(len(x), -1)
        keys = np.floor(x / h).astype(int)
        cand = {}
        for n, k in enumerate(map(tuple, keys)):
            for i in cells.get(k, []) + cells.get("big", []):
                cand.setdefault(i, []).append(n)
        for i, idx in cand.items():
            idx = np.array([n for n in idx if out[n] < 0])
            if len(idx) == 0:
                continue
            pts = x[idx]
            box = np.all((pts >= lo[i] - 1e-12) & (pts <= hi[i] + 1e-12), axis=1)
            if not box.any():
                continue
            ok = self.pieces[i].contains(pts[box])
            out[idx[box][ok]] = i
        return out

    def flow(self, x, T: float, max_hops: int = 100000) -> np.ndarray:
        """Move points for time T; points outside every support stay put.

        Within a piece the closed-form position is used; at a sink the point
        continues on the linked piece.  A point reaching a sink with no
        successor stops there.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = x.copy()
        piece = self.which(x)
        act = np.flatnonzero(piece >= 0)
        if len(act) == 0:
            return out
        z = np.empty((len(act), 3))
        tau = np.empty(len(act))
        pc = piece[act]
        for i in np.unique(pc):
            m = pc == i
            z[m], tau[m] = self.pieces[i].locate(x[act][m])
        rem = np.full(len(act), float(T))
        live = np.ones(len(act), bool)
        for _ in range(max_hops):
            if not live.any():
                break
            for i in np.unique(pc[live]):
                m = live & (pc == i)
                p = self.pieces[i]
                left = p.transit - tau[m]
                fin = rem[m] <= left
                mi = np.flatnonzero(m)
                f = mi[fin]
                if len(f):
                    out[act[f]] = p.position(z[f], tau[f] + rem[f])
                    live[f] = False
                g = mi[~fin]
                if len(g):
                    rem[g] -= left[~fin]
                    zz = p.sink_map(z[g])
                    nxt = self.succ[i]
                    if nxt < 0:
                        out[act[g]] = zz
                        live[g] = False
                    else:
                        z[g], tau[g], pc[g] = zz, 0.0, nxt
        else:
            raise RuntimeError("flow did not finish within the hop limit")
        return out

    # overlap audit
    def overlaps(self, tol: float = 1e-9, max_report: int = 10) -> list:
        if not self.pieces:
            return []
        boxes = [p.bbox() for p in self.pieces]
        lo = np.array([b[0] for b in boxes])
        hi = np.array([b[1] for b in boxes])
        scale = float(np.max(hi - lo)) if len(boxes) else 1.0
        order = np.argsort(lo[:, 0])
        found = []
        active = []
        for i in order:
            active = [j for j in active if hi[j, 0] > lo[i, 0] + tol * scale]
            for j in active:
                inter = np.minimum(hi[i], hi[j]) - np.maximum(lo[i], lo[j])
                if np.all(inter > tol * scale):
                    depth = _max_inscribed(self.pieces[i], self.pieces[j])
                    if depth > tol * scale:
                        found.append((min(i, j), max(i, j), depth))
                        if len(found) >= max_report:
                            return found
            active.append(i)
        return found

    def audit(self, tol: float = 1e-9) -> None:
        bad = self.overlaps(tol, 1)
        if bad:
            i, j, depth = bad[0]
            raise OverlapError(i, j, depth)


def _max_inscribed(p: Piece, q: Piece) -> float:
    """Radius of the largest ball inside some convex part of both supports."""
    from scipy.optimize import linprog
    best = 0.0
    for P in p.polytopes():
        for Q in q.polytopes():
            A = np.vstack([P.A, Q.A])
            b = np.concatenate([P.b, Q.b])
            A_ub = np.hstack([A, np.ones((len(A), 1))])
            res = linprog(c=[0, 0, 0, -1], A_ub=A_ub, b_ub=b,
                          bounds=[(None, None)] * 3 + [(None, None)], method="highs")
            if res.status == 0:
                best = max(best, -res.fun)
    return best


def union(fields: Sequence, window=(0.0, 1.0), tol: float = 1e-9) -> PiecewiseField:
    pieces = []
    for f in fields:
        if isinstance(f, PiecewiseField):
            pieces.extend(f.pieces)
        elif isinstance(f, Chain):
            pieces.extend(f.pieces)
        else:
            pieces.append(f)
    pf = PiecewiseField(pieces, window)
    pf.audit(tol)
    return pf


# ---------------------------------------------------------------- norms and audits

def lp_norm(pieces: Sequence[Piece], p, samples: int = 10 ** 6, seed: int = 0) -> dict:
    """Certified bound of ||u||_{L^p} plus a seeded Monte Carlo estimate.

    Constant pieces contribute exactly; other pieces contribute the
    closed-form or sup-times-volume bound.  For p = inf the bound is the
    largest sup norm.
    """
    pieces = list(pieces.pieces if isinstance(pieces, (Chain, PiecewiseField)) else pieces)
    rng = np.random.default_rng(seed)
    boxes = [pc.bbox() for pc in pieces]
    vols = np.array([np.prod(b[1] - b[0]) for b in boxes])
    alloc = np.maximum(50, np.floor(samples * vols / vols.sum())).astype(int) if len(pieces) else []
    inf = p == math.inf or p == "inf"
    if inf:
        bound = max((pc.sup_norm() for pc in pieces), default=0.0)
        est = 0.0
        for pc, (lo, hi), n in zip(pieces, boxes, alloc):
            x = rng.uniform(lo, hi, (n, 3))
            est = max(est, float(np.linalg.norm(pc.velocity(x), axis=1).max(initial=0.0)))
        return {"p": "inf", "bound": bound, "exact": False, "mc": est, "mc_stderr": 0.0}
    p = float(p)
    total, exact, mc, var = 0.0, True, 0.0, 0.0
    for pc, (lo, hi), n, vol in zip(pieces, boxes, alloc, vols):
        val, ex = pc.lp_power(p)
        total += val
        exact &= ex
        x = rng.uniform(lo, hi, (n, 3))
        f = vol * np.linalg.norm(pc.velocity(x), axis=1) ** p
        mc += f.mean()
        var += f.var(ddof=1) / n
    norm = total ** (1 / p)
    est = mc ** (1 / p)
    # delta method for the p-th root
    se = (mc ** (1 / p - 1) / p) * math.sqrt(var) if mc > 0 else 0.0
    return {"p": p, "bound": norm, "exact": bool(exact), "mc": est, "mc_stderr": se}


def divergence_audit(piece: Piece, n: int = 100, seed: int = 0) -> dict:
    """Finite-difference divergence at interior samples plus the flux balance."""
    rng = np.random.default_rng(seed)
    lo, hi = piece.bbox()
    src = piece.source
    width = min(s[1] - s[0] for s in src.spans)
    h = 1e-4 * width
    pts = []
    tries = 0
    while len(pts) < n and tries < 200:
        tries += 1
        x = rng.uniform(lo, hi, (4000, 3))
        ok = piece.contains(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            ok &= piece.contains(x + e) & piece.contains(x - e)
        pts.extend(x[ok][: n - len(pts)])
    x = np.array(pts)
    div = np.zeros(len(x))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        div += (piece.velocity(x + e)[:, k] - piece.velocity(x - e)[:, k]) / (2 * h)
    sup = piece.sup_norm()
    tol = 1e-8 * sup / h
    fa = piece.speed_source * src.area
    # quadrature of u . n over the sink rectangle
    snk = piece.sink
    g, w = np.polynomial.legendre.leggauss(12)
    (a, b), (c, d) = snk.spans
    U, V = np.meshgrid(0.5 * (b - a) * (g + 1) + a, 0.5 * (d - c) * (g + 1) + c, indexing="ij")
    y = np.zeros((U.size, 3))
    y[:, snk.axis] = snk.offset
    y[:, snk.others[0]], y[:, snk.others[1]] = U.ravel(), V.ravel()
    un = piece.velocity(y, masked=False) @ snk.normal
    W = np.outer(w, w).ravel() * 0.25 * (b - a) * (d - c)
    fb = float(np.dot(W, un))
    rel = abs(fb - fa) / fa
    return {"samples": int(len(x)), "h": h, "max_fd_divergence": float(np.abs(div).max(initial=0.0)),
            "fd_tolerance": tol, "interior_ok": bool(np.all(np.abs(div) <= tol)) and len(x) == n,
            "flux_in": fa, "flux_out_quadrature": fb, "flux_rel_error": rel, "flux_ok": rel <= 1e-12}


def _trace_switched(piece: Piece, x: np.ndarray, steps: int) -> np.ndarray:
    """Integrator for piecewise-constant fields (the snake cell).

    Inside one region every RK4 stage sees the same velocity, so a step is
    exact; a step whose end sees a different velocity is cut at the switch,
    located by bisection along the current direction.
    """
    T = piece.transit
    dt = T / steps
    rem = np.full(len(x), T)
    for _ in range(8 * steps):
        live = rem > 1e-15 * T
        if not live.any():
            break
        xi, ri = x[live], rem[live]
        h = np.minimum(dt, ri)
        v0 = piece.velocity(xi, masked=False)
        v1 = piece.velocity(xi + h[:, None] * v0, masked=False)
        same = np.all(v0 == v1, axis=1)
        step = h.copy()
        sw = ~same
        if sw.any():
            lo, hi = np.zeros(sw.sum()), h[sw].copy()
            xs, vs = xi[sw], v0[sw]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                ok = np.all(piece.velocity(xs + mid[:, None] * vs, masked=False) == vs, axis=1)
                lo = np.where(ok, mid, lo)
                hi = np.where(ok, hi, mid)
            step[sw] = hi
        x[live] = xi + step[:, None] * v0
        rem[live] = ri - step
    return x


def trace_rk4(piece: Piece, z, steps: int = 10 ** 4) -> np.ndarray:
    """Classical RK4 through each smooth phase of the piece's field."""
    x = np.atleast_2d(np.asarray(z, dtype=float)).copy()
    try:
        phases = piece.phases()
    except NotImplementedError:
        return _trace_switched(piece, x, steps)
    T = sum(d for _, d in phases)
    for fn, dur in phases:
        m = max(1, int(round(steps * dur / T)))
        dt = dur / m
        for _ in range(m):
            k1 = fn(x)
            k2 = fn(x + 0.5 * dt * k1)
            k3 = fn(x + 0.5 * dt * k2)
            k4 = fn(x + dt * k3)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
