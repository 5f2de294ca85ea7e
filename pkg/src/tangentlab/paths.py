"""Càdlàg paths recorded on finite knot lists.

A :class:`CadlagPath` stores, at each knot, the left limit and the
(right-continuous) value.  Between consecutive knots the path is the
straight line from the value at the earlier knot to the left limit at the
later one, so constant segments, linear drifts and interpolated diffusive
segments share one representation.

CSV layout used by :meth:`CadlagPath.to_csv` / :meth:`CadlagPath.read_csv`::

    t,left_1,...,left_d,right_1,...,right_d

one row per knot, in increasing time order, first row ``t = 0`` and last
row ``t = T``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "KNOT_TOL",
    "CadlagPath",
    "TimeChange",
    "RunningSup",
    "QuadraticVariation",
    "PathBundle",
    "running_sup",
    "realized_quadratic_variation",
    "skorokhod_j1",
    "sup_distance",
    "apply_time_change",
    "merge_times",
]

KNOT_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


def merge_times(*arrays: Iterable[float], tol: float = KNOT_TOL) -> np.ndarray:
    """Sorted union of time arrays, collapsing points closer than ``tol``."""
    t = np.sort(np.concatenate([np.atleast_1d(np.asarray(a, dtype=float)) for a in arrays]))
    if t.size == 0:
        return t
    keep = np.concatenate([[True], np.diff(t) > tol])
    return t[keep]


class CadlagPath:
    """Right-continuous R^d-valued path on ``[0, T]`` with explicit jumps.

    Parameters
    ----------
    times : (K,) array
        Strictly increasing knots, ``times[0] == 0``; the last knot is the
        horizon.
    left, right : (K, d) arrays
        Left limits and values at the knots.  ``left[0]`` must equal
        ``right[0]`` (no jump at time zero).
    """

    __slots__ = ("times", "left", "right")

    def __init__(self, times, left, right):
        times = np.asarray(times, dtype=float)
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        if left.ndim == 1:
            left = left[:, None]
        if right.ndim == 1:
            right = right[:, None]
        if times.ndim != 1 or times.size < 2:
            raise ValueError("a path needs at least the knots 0 and T")
        if times[0] != 0.0:
            raise ValueError(f"first knot must be 0, got {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise ValueError("knots must be strictly increasing")
        if left.shape != right.shape or left.shape[0] != times.size:
            raise ValueError("left/right values must have shape (len(times), d)")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise ValueError("path values must be finite")
        if np.any(left[0] != right[0]):
            raise ValueError("a path cannot jump at time 0")
        self.times = _frozen(times)
        self.left = _frozen(left)
        self.right = _frozen(right)

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, horizon: float, dim: int = 1) -> "CadlagPath":
        z = np.zeros((2, dim))
        return cls([0.0, horizon], z, z)

    @classmethod
    def continuous(cls, times, values) -> "CadlagPath":
        """Piecewise-linear continuous path through ``values`` at ``times``."""
        values = np.asarray(values, dtype=float)
        return cls(times, values, values)

    @classmethod
    def step(cls, horizon: float, jump_times, jumps, dim: int | None = None, start=None) -> "CadlagPath":
        """Pure-jump path: constant between the given jumps."""
        jt = np.asarray(jump_times, dtype=float).reshape(-1)
        jumps = np.asarray(jumps, dtype=float)
        if dim is None:
            dim = jumps.shape[-1] if jumps.ndim == 2 else 1
        jumps = jumps.reshape(jt.size, dim)
        if np.any(jt <= 0) or np.any(jt > horizon):
            raise ValueError("jump times must lie in (0, T]")
        order = np.argsort(jt, kind="stable")
        jt, jumps = jt[order], jumps[order]
        x0 = np.zeros(dim) if start is None else np.asarray(start, dtype=float).reshape(dim)
        times = merge_times([0.0, horizon], jt)
        right = np.empty((times.size, dim))
        left = np.empty((times.size, dim))
        idx = np.searchsorted(times, jt - KNOT_TOL)
        dj = np.zeros((times.size, dim))
        np.add.at(dj, idx, jumps)
        right[:] = x0 + np.cumsum(dj, axis=0)
        left[0] = x0
        left[1:] = right[:-1]
        return cls(times, left, right)

    # -- basic properties ---------------------------------------------------
    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.right.shape[1]

    @property
    def jump_sizes(self) -> np.ndarray:
        return self.right - self.left

    @property
    def jump_mask(self) -> np.ndarray:
        return np.any(self.right != self.left, axis=1)

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[self.jump_mask]

    @property
    def jumps(self) -> np.ndarray:
        return self.jump_sizes[self.jump_mask]

    def is_step(self) -> bool:
        """True if the path is constant between knots."""
        return bool(np.all(self.right[:-1] == self.left[1:]))

    def is_continuous(self) -> bool:
        return not np.any(self.jump_mask)

    # -- evaluation -----------------------------------------------------------
    def _check_domain(self, t: np.ndarray) -> None:
        if np.any(t < 0) or np.any(t > self.horizon):
            raise ValueError(f"time outside [0, {self.horizon}]")

    def _locate(self, t: np.ndarray):
        """Knot index k with times[k] <= t (snapped within KNOT_TOL) and a knot flag."""
        k = np.searchsorted(self.times, t + KNOT_TOL, side="right") - 1
        k = np.clip(k, 0, self.times.size - 1)
        on_knot = np.abs(self.times[k] - t) <= KNOT_TOL
        return k, on_knot

    def _interp(self, k: np.ndarray, t: np.ndarray) -> np.ndarray:
        k1 = np.minimum(k + 1, self.times.size - 1)
        t0, t1 = self.times[k], self.times[k1]
        w = np.where(t1 > t0, (t - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0)
        return self.right[k] + w[..., None] * (self.left[k1] - self.right[k])

    def eval(self, t) -> np.ndarray:
        """Right-continuous value; vectorized over ``t``."""
        t = np.asarray(t, dtype=float)
        self._check_domain(t)
        k, on_knot = self._locate(t)
        return np.where(on_knot[..., None], self.right[k], self._interp(k, t))

    __call__ = eval

    def left_limit(self, t) -> np.ndarray:
        """Left limit ``x(t-)``; at ``t = 0`` this is the initial value."""
        t = np.asarray(t, dtype=float)
        self._check_domain(t)
        k, on_knot = self._locate(t)
        return np.where(on_knot[..., None], self.left[k], self._interp(k, t))

    def values_at(self, t):
        """(left, right) at arbitrary times, snapping to knots within tolerance."""
        return self.left_limit(t), self.eval(t)

    # -- algebra ----------------------------------------------------------------
    def _binary(self, other: "CadlagPath", op: Callable) -> "CadlagPath":
        if not isinstance(other, CadlagPath):
            return NotImplemented
        if abs(self.horizon - other.horizon) > KNOT_TOL or self.dim != other.dim:
            raise ValueError("paths must share horizon and dimension")
        t = merge_times(self.times, other.times)
        t[-1] = self.horizon
        la, ra = self.values_at(t)
        lb, rb = other.values_at(t)
        return CadlagPath(t, op(la, lb), op(ra, rb))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __neg__(self):
        return CadlagPath(self.times, -self.left, -self.right)

    def __mul__(self, c):
        c = float(c)
        return CadlagPath(self.times, c * self.left, c * self.right)

    __rmul__ = __mul__

    def project(self, direction) -> "CadlagPath":
        """Scalar path ``<x(t), direction>``."""
        u = np.asarray(direction, dtype=float).reshape(self.dim)
        return CadlagPath(self.times, self.left @ u, self.right @ u)

    def restrict_knots(self) -> "CadlagPath":
        """Drop knots that are neither jumps nor breaks of linearity."""
        keep = np.ones(self.times.size, dtype=bool)
        for k in range(1, self.times.size - 1):
            if self.left[k].tolist() != self.right[k].tolist():
                continue
            t0, t1, t2 = self.times[k - 1], self.times[k], self.times[k + 1]
            a, b, c = self.right[k - 1], self.right[k], self.left[k + 1]
            lin = a + (c - a) * (t1 - t0) / (t2 - t0)
            keep[k] = not np.allclose(lin, b, rtol=0, atol=1e-14)
        return CadlagPath(self.times[keep], self.left[keep], self.right[keep])

    def __eq__(self, other):
        if not isinstance(other, CadlagPath):
            return NotImplemented
        return (
            self.times.shape == other.times.shape
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
        )

    def __hash__(self):
        return hash((self.times.tobytes(), self.left.tobytes(), self.right.tobytes()))

    def __repr__(self):
        return f"CadlagPath(T={self.horizon:g}, d={self.dim}, knots={self.times.size}, jumps={int(self.jump_mask.sum())})"

    # -- serialization ------------------------------------------------------------
    def to_csv(self, file) -> None:
        d = self.dim
        header = ["t"] + [f"left_{i + 1}" for i in range(d)] + [f"right_{i + 1}" for i in range(d)]
        own = isinstance(file, (str, bytes)) or hasattr(file, "__fspath__")
        fh = open(file, "w", newline="") if own else file
        try:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.times.size):
                w.writerow([repr(float(self.times[k]))] + [repr(float(v)) for v in self.left[k]] + [repr(float(v)) for v in self.right[k]])
        finally:
            if own:
                fh.close()

    @classmethod
    def read_csv(cls, file) -> "CadlagPath":
        own = isinstance(file, (str, bytes)) or hasattr(file, "__fspath__")
        fh = open(file, newline="") if own else file
        try:
            rows = list(csv.reader(fh))
        finally:
            if own:
                fh.close()
        header, body = rows[0], rows[1:]
        d = (len(header) - 1) // 2
        if header[0] != "t" or len(header) != 2 * d + 1:
            raise ValueError("unexpected CSV header for a path")
        data = np.array(body, dtype=float)
        return cls(data[:, 0], data[:, 1 : d + 1], data[:, d + 1 :])


@dataclass(frozen=True)
class TimeChange:
    """Continuous nondecreasing piecewise-linear clock ``A`` with ``A(0) = 0``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ValueError("time change needs matching breakpoint arrays")
        if t[0] != 0.0 or v[0] != 0.0:
            raise ValueError("time change must start at (0, 0)")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time-change breakpoints must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise ValueError("time change must be nondecreasing")
        object.__setattr__(self, "times", _frozen(t))
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def identity(cls, horizon: float) -> "TimeChange":
        return cls(np.array([0.0, horizon]), np.array([0.0, horizon]))

    @classmethod
    def linear(cls, horizon: float, rate: float) -> "TimeChange":
        return cls(np.array([0.0, horizon]), np.array([0.0, rate * horizon]))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def range(self) -> float:
        return float(self.values[-1])

    @property
    def strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.values) > 0))

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    def inverse(self, s):
        """Generalized inverse ``inf{t : A(t) >= s}``."""
        s = np.asarray(s, dtype=float)
        if np.any(s < -KNOT_TOL) or np.any(s > self.range + KNOT_TOL):
            raise ValueError("level outside the range of the time change")
        k = np.searchsorted(self.values, s, side="left")
        k = np.clip(k, 1, self.values.size - 1)
        v0, v1 = self.values[k - 1], self.values[k]
        t0, t1 = self.times[k - 1], self.times[k]
        w = np.where(v1 > v0, (s - v0) / np.where(v1 > v0, v1 - v0, 1.0), 0.0)
        out = t0 + np.clip(w, 0.0, 1.0) * (t1 - t0)
        return np.where(s <= self.values[0], self.times[0], out)


class RunningSup:
    """``t -> sup_{s <= t} max(|x(s)|, |x(s-)|)`` for a piecewise-linear path."""

    def __init__(self, path: CadlagPath, norm: Callable[[np.ndarray], np.ndarray]):
        self.path = path
        self._norm = norm
        at_knots = np.maximum(norm(path.left), norm(path.right))
        self.times = path.times
        self.values = _frozen(np.maximum.accumulate(at_knots))

    @property
    def terminal(self) -> float:
        return float(self.values[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k, on_knot = self.path._locate(t)
        # norms are convex, so a segment's sup sits at its endpoints
        inner = np.maximum(self.values[k], self._norm(self.path.eval(t)))
        return np.where(on_knot, self.values[k], inner)


def _norm_fn(norm) -> Callable[[np.ndarray], np.ndarray]:
    if callable(norm):
        return norm
    order = 2 if norm is None else norm
    return lambda x: np.linalg.norm(x, ord=order, axis=-1)


def running_sup(path: CadlagPath, norm=2) -> RunningSup:
    """Running supremum of ``|x|`` for a p-norm selector (or a callable)."""
    return RunningSup(path, _norm_fn(norm))


def sup_distance(a: CadlagPath, b: CadlagPath, norm=2) -> float:
    """Uniform distance ``sup_t |a(t) - b(t)|``."""
    diff = a - b
    f = _norm_fn(norm)
    return float(max(f(diff.left).max(), f(diff.right).max()))


class QuadraticVariation:
    """Cumulative matrix-valued realized quadratic variation on a mesh."""

    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = _frozen(times)
        self.values = _frozen(values)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t + KNOT_TOL, side="right") - 1
        return self.values[np.clip(k, 0, self.times.size - 1)]


def realized_quadratic_variation(path: CadlagPath, mesh=None) -> QuadraticVariation:
    """Sum of outer products of increments over a mesh.

    The mesh must contain ``0``, ``T`` and every jump time of ``path``;
    by default the path's own knots are used.
    """
    if mesh is None:
        mesh = path.times
    mesh = np.asarray(mesh, dtype=float)
    if np.any(np.diff(mesh) <= 0):
        raise ValueError("mesh must be strictly increasing")
    if abs(mesh[0]) > KNOT_TOL or abs(mesh[-1] - path.horizon) > KNOT_TOL:
        raise ValueError("mesh must span [0, T]")
    jt = path.jump_times
    if jt.size:
        pos = np.clip(np.searchsorted(mesh, jt), 0, mesh.size - 1)
        near = np.minimum(np.abs(mesh[pos] - jt), np.abs(mesh[np.maximum(pos - 1, 0)] - jt))
        if np.any(near > KNOT_TOL):
            raise ValueError("mesh does not refine the jump times of the path")
    x = path.eval(mesh)
    inc = np.diff(x, axis=0)
    outer = inc[:, :, None] * inc[:, None, :]
    values = np.concatenate([np.zeros((1, path.dim, path.dim)), np.cumsum(outer, axis=0)])
    return QuadraticVariation(mesh, values)


def apply_time_change(path: CadlagPath, tc: TimeChange) -> CadlagPath:
    """The path ``t -> path(A(t))`` on the time-change domain."""
    if tc.range > path.horizon + KNOT_TOL:
        raise ValueError("time change overflows the path horizon")
    level = path.times[path.times <= tc.range + KNOT_TOL]
    t = merge_times(tc.times, tc.inverse(np.minimum(level, tc.range)))
    t[0], t[-1] = 0.0, tc.horizon
    a = np.minimum(tc(t), path.horizon)
    right = path.eval(a)
    left = path.left_limit(a)
    # where the clock is flat just before a knot, the left limit is the current value
    flat = np.concatenate([[True], np.diff(a) <= 0])
    left = np.where(flat[:, None], right, left)
    left[0] = right[0]
    return CadlagPath(t, left, right)


# ---------------------------------------------------------------------------
# Skorokhod J1 distance
# ---------------------------------------------------------------------------


def _events(path: CadlagPath):
    """Jump times in (0, T) plus a terminal event at T, and the running values."""
    T = path.horizon
    mask = path.jump_mask.copy()
    mask[-1] = False
    times = np.concatenate([path.times[mask], [T]])
    values = np.concatenate([path.right[:1], path.right[mask], path.right[-1:]], axis=0)
    return times, values


def _bottleneck(ta, tb, cost, delta: float) -> float:
    """Min over admissible interleavings of the max value gap, time slack ``delta``."""
    na, nb = ta.size, tb.size
    T = ta[-1]
    inf = np.inf
    V = [[inf] * (nb + 1) for _ in range(na + 1)]
    V[0][0] = cost[0][0]
    gap_lo = np.concatenate([[0.0], ta[:-1]])
    for i in range(na + 1):
        for j in range(nb + 1):
            v = V[i][j]
            if v == inf:
                continue
            # a-event i+1 alone (never the terminal one)
            if i + 1 < na:
                w = max(v, cost[i + 1][j])
                if w < V[i + 1][j]:
                    V[i + 1][j] = w
            # b-event j+1 alone, placed in the a-gap (t_i, t_{i+1})
            if j + 1 < nb and i < na:
                s = tb[j]
                lo, hi = gap_lo[i], ta[i]
                if max(lo - s, s - hi, 0.0) <= delta:
                    w = max(v, cost[i][j + 1])
                    if w < V[i][j + 1]:
                        V[i][j + 1] = w
            # coincident events
            if i < na and j < nb:
                terminal_a, terminal_b = i + 1 == na, j + 1 == nb
                if terminal_a != terminal_b:
                    continue
                if terminal_a or abs(ta[i] - tb[j]) <= delta:
                    w = max(v, cost[i + 1][j + 1])
                    if w < V[i + 1][j + 1]:
                        V[i + 1][j + 1] = w
    del T
    return V[na][nb]


def _j1_step(a: CadlagPath, b: CadlagPath, norm) -> float:
    ta, va = _events(a)
    tb, vb = _events(b)
    cost = norm(va[:, None, :] - vb[None, :, :]).tolist()
    candidates = np.unique(np.concatenate([[0.0], np.abs(ta[:-1, None] - tb[None, :-1]).ravel(), np.abs(np.concatenate([[0.0], ta[:-1]])[:, None] - tb[None, :-1]).ravel()]))
    best = np.inf
    for delta in candidates:
        if delta >= best:
            break
        v = _bottleneck(ta, tb, cost, float(delta))
        best = min(best, float(delta) + v)
    return best


def _lambda_candidates(a: CadlagPath, b: CadlagPath, norm) -> list:
    """Piecewise-linear reparametrizations aligning the jumps of ``b`` to ``a``."""
    T = a.horizon
    ta, _ = _events(a)
    tb, _ = _events(b)
    out = []
    if tb.size <= 1:
        return out
    inner_a = ta[:-1]
    for mode in ("nearest", "clip"):
        u = []
        for s in tb[:-1]:
            if mode == "nearest" and inner_a.size:
                k = int(np.argmin(np.abs(inner_a - s)))
                u.append(inner_a[k])
            else:
                u.append(s)
        u = np.array(u, dtype=float)
        eps = 1e-9 * T
        for k in range(u.size):
            lo = eps if k == 0 else u[k - 1] + eps
            u[k] = min(max(u[k], lo), T - eps * (u.size - k))
        knots_t = np.concatenate([[0.0], u, [T]])
        knots_v = np.concatenate([[0.0], tb[:-1], [T]])
        if np.all(np.diff(knots_t) > 0):
            out.append(TimeChange(knots_t, knots_v))
    return out


def _j1_cost(a: CadlagPath, b: CadlagPath, lam: TimeChange, norm) -> float:
    moved = apply_time_change(b, lam)
    shift = float(np.max(np.abs(lam.values - lam.times)))
    diff = a - moved
    return shift + float(max(norm(diff.left).max(), norm(diff.right).max()))


def skorokhod_j1(a: CadlagPath, b: CadlagPath, norm=2) -> float:
    """Skorokhod J1 distance ``inf_λ (|λ - id|_∞ + |a - b∘λ|_∞)``.

    For pure-step paths the infimum over increasing bijections is computed
    exactly: only the interleaving of the two jump sets matters, the time
    distortion of an interleaving is a box-constrained projection, and the
    value gap is a bottleneck path through the interleaving grid.  For paths
    with linear segments the result is an upper bound (the smallest cost over
    the identity and jump-aligning reparametrizations, in both directions),
    always at most the uniform distance.
    """
    if abs(a.horizon - b.horizon) > KNOT_TOL or a.dim != b.dim:
        raise ValueError("paths must share horizon and dimension")
    f = _norm_fn(norm)
    if a.is_step() and b.is_step():
        return min(_j1_step(a, b, f), _j1_step(b, a, f))
    best = sup_distance(a, b, norm=f)
    for lam in _lambda_candidates(a, b, f):
        best = min(best, _j1_cost(a, b, lam, f))
    for lam in _lambda_candidates(b, a, f):
        best = min(best, _j1_cost(b, a, lam, f))
    return best


# ---------------------------------------------------------------------------
# Bundles of simulated paths on a shared grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathBundle:
    """A batch of composite paths sharing a time grid.

    Each path is the sum of a continuous part (linear between grid points),
    a compensated jump part with finitely many marks (atoms strictly inside
    grid cells, compensators linear within cells) and an accessible part
    that jumps only at grid points.

    Attributes
    ----------
    grid : (G+1,) shared grid, ``grid[0] = 0``, ``grid[-1] = T``
    continuous : (B, G+1, d) or None
    marks : (m, d) mark vectors (m may be 0)
    compensator : (B, G+1, m) cumulative intensities at grid points
    counts : (B, G+1, m) cumulative atom counts at grid points
    atom_path, atom_time, atom_mark : flat atom arrays sorted by (path, time)
    acc_index : (k,) grid indices of the accessible times
    acc_jumps : (B, k, d)
    """

    grid: np.ndarray
    dim: int
    n_paths: int
    continuous: np.ndarray | None
    marks: np.ndarray
    compensator: np.ndarray | None
    counts: np.ndarray | None
    atom_path: np.ndarray
    atom_time: np.ndarray
    atom_mark: np.ndarray
    acc_index: np.ndarray
    acc_jumps: np.ndarray | None

    def __len__(self):
        return self.n_paths

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    # -- grid values ------------------------------------------------------------
    def continuous_grid(self) -> np.ndarray:
        if self.continuous is None:
            return np.zeros((self.n_paths, self.grid.size, self.dim))
        return self.continuous

    def qlc_grid(self) -> np.ndarray:
        if self.compensator is None or self.marks.shape[0] == 0:
            return np.zeros((self.n_paths, self.grid.size, self.dim))
        return np.einsum("bgm,md->bgd", self.counts - self.compensator, self.marks)

    def accessible_grid(self) -> np.ndarray:
        out = np.zeros((self.n_paths, self.grid.size, self.dim))
        if self.acc_jumps is None:
            return out
        for l, g in enumerate(self.acc_index):
            out[:, g:, :] += self.acc_jumps[:, l, None, :]
        return out

    @cached_property
    def _values(self) -> np.ndarray:
        v = self.continuous_grid() + self.qlc_grid() + self.accessible_grid()
        v.flags.writeable = False
        return v

    def values(self) -> np.ndarray:
        """Composite right values at grid points, shape (B, G+1, d)."""
        return self._values

    def grid_index(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.searchsorted(self.grid, times - KNOT_TOL)
        idx = np.clip(idx, 0, self.grid.size - 1)
        if np.any(np.abs(self.grid[idx] - times) > KNOT_TOL):
            raise ValueError("requested times are not grid points")
        return idx

    def at(self, times) -> np.ndarray:
        """Values at grid times, shape (B, len(times), d)."""
        return self.values()[:, self.grid_index(times), :]

    def terminal(self) -> np.ndarray:
        return self.values()[:, -1, :]

    # -- knots ------------------------------------------------------------------------
    def _atom_values(self, vals: np.ndarray | None = None):
        """Right values and jumps of the composite at each atom."""
        n = self.atom_time.size
        if n == 0:
            return np.zeros((0, self.dim)), np.zeros((0, self.dim))
        if vals is None:
            vals = self.values()
        g = self.grid
        cell = np.searchsorted(g, self.atom_time, side="right") - 1
        b = self.atom_path
        w = (self.atom_time - g[cell]) / (g[cell + 1] - g[cell])
        base = vals[b, cell, :]
        if self.continuous is not None:
            c = self.continuous
            base = base + w[:, None] * (c[b, cell + 1, :] - c[b, cell, :])
        dlam = self.compensator[b, cell + 1, :] - self.compensator[b, cell, :]
        base = base - w[:, None] * (dlam @ self.marks)
        x = self.marks[self.atom_mark]
        # cumulative jumps inside the same (path, cell), atoms sorted by time
        # (summed locally so a path's values do not depend on the batch)
        key = b.astype(np.int64) * g.size + cell
        start = np.concatenate([[True], key[1:] != key[:-1]])
        idx = np.arange(n)
        rank = idx - np.maximum.accumulate(np.where(start, idx, 0))
        local = x.copy()
        for r in range(1, int(rank.max()) + 1):
            sel = rank >= r
            local[sel] += x[idx[sel] - r]
        return base + local, x

    def path_sup(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``sup_t func(x(t))`` per path over all knots, left and right values.

        Exact for convex ``func`` (e.g. norms) and for coordinate maxima,
        since paths are linear between knots.
        """
        vals = self.values()
        gv = func(vals)
        out = gv.max(axis=1)
        if self.acc_jumps is not None and self.acc_index.size:
            left = vals[:, self.acc_index, :] - self.acc_jumps
            out = np.maximum(out, func(left).max(axis=1))
        if self.atom_time.size:
            right, x = self._atom_values(vals)
            at = np.maximum(func(right), func(right - x))
            np.maximum.at(out, self.atom_path, at)
        return out

    def sup_norm(self, ord=2) -> np.ndarray:
        return self.path_sup(lambda v: np.linalg.norm(v, ord=ord, axis=-1))

    # -- single paths -------------------------------------------------------------------
    def select(self, index) -> "PathBundle":
        """Sub-bundle of the given batch positions (kept in the given order)."""
        index = np.atleast_1d(np.asarray(index, dtype=np.int64))
        remap = -np.ones(self.n_paths, dtype=np.int64)
        remap[index] = np.arange(index.size)
        keep = remap[self.atom_path] >= 0
        new_path = remap[self.atom_path[keep]]
        order = np.lexsort((self.atom_time[keep], new_path))
        return PathBundle(
            grid=self.grid,
            dim=self.dim,
            n_paths=index.size,
            continuous=None if self.continuous is None else self.continuous[index],
            marks=self.marks,
            compensator=None if self.compensator is None else self.compensator[index],
            counts=None if self.counts is None else self.counts[index],
            atom_path=new_path[order],
            atom_time=self.atom_time[keep][order],
            atom_mark=self.atom_mark[keep][order],
            acc_index=self.acc_index,
            acc_jumps=None if self.acc_jumps is None else self.acc_jumps[index],
        )

    def atoms_of(self, i: int):
        lo, hi = np.searchsorted(self.atom_path, [i, i + 1])
        return self.atom_time[lo:hi], self.atom_mark[lo:hi]

    def parts(self, i: int = 0):
        """The continuous, compensated-jump and accessible parts of path ``i``."""
        g = self.grid
        cont = CadlagPath.continuous(g, self.continuous_grid()[i])
        # compensated jump part
        times, marks = self.atoms_of(i)
        if self.compensator is not None and self.marks.shape[0]:
            drift = CadlagPath.continuous(g, -(self.compensator[i] @ self.marks))
            jumps = CadlagPath.step(self.horizon, times, self.marks[marks], dim=self.dim)
            qlc = drift + jumps
        else:
            qlc = CadlagPath.zero(self.horizon, self.dim)
        if self.acc_jumps is not None and self.acc_index.size:
            acc = CadlagPath.step(self.horizon, g[self.acc_index], self.acc_jumps[i], dim=self.dim)
        else:
            acc = CadlagPath.zero(self.horizon, self.dim)
        return cont, qlc, acc

    def path(self, i: int = 0) -> CadlagPath:
        """Path ``i`` assembled on the knots grid ∪ atom times."""
        vals = self.values()[i]
        g = self.grid
        left_g = vals.copy()
        if self.acc_jumps is not None and self.acc_index.size:
            left_g[self.acc_index] -= self.acc_jumps[i]
        left_g[0] = vals[0]
        sub = self.select([i])
        right_a, x = sub._atom_values(sub.values())
        t = np.concatenate([g, sub.atom_time])
        L = np.concatenate([left_g, right_a - x])
        R = np.concatenate([vals, right_a])
        order = np.argsort(t, kind="stable")
        return CadlagPath(t[order], L[order], R[order])

    def paths(self) -> list:
        return [self.path(i) for i in range(self.n_paths)]
