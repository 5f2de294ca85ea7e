"""Composite martingale models and their batch simulator.

A :class:`MartingaleModel` is the sum of up to three independent-looking
building blocks that may nevertheless feed back on the running state:

* a continuous part ``dM^c_t = Φ(t) dW_{A(t)}`` with an elementary
  predictable integrand ``Φ`` (constant on mesh intervals, chosen from the
  state at the left endpoint) and a deterministic clock ``A``;
* a quasi-left-continuous part ``Σ_j x_j (N_j(t) - Λ_j(t))`` over a finite
  mark alphabet, with cumulative intensities that are piecewise linear and
  possibly scaled by a predictable functional of the state;
* an accessible part with jumps at fixed times whose laws are finite
  mean-zero tables keyed on the previous accessible jumps.

Simulation happens on a shared grid containing every breakpoint the model
declares, for a batch of path ids at once.  All randomness is drawn from
:class:`tangentlab.rng.Stream` counters, so each path depends only on
``(seed, path id)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .paths import KNOT_TOL, CadlagPath, PathBundle, TimeChange, merge_times
from .rng import Stream

__all__ = [
    "DiscreteLaw",
    "ElementaryIntegrand",
    "ContinuousPart",
    "QlcIntensity",
    "AccessibleKernel",
    "MartingaleModel",
    "SimState",
    "SimulationTrace",
    "TanhFeedback",
    "JumpCountFeedback",
    "AfterFirstJump",
    "CountLinear",
    "validate",
    "build_grid",
    "simulate",
    "simulate_batch",
    "iter_batches",
    "state_at",
    "regenerate",
    "conditional_increment_law_sampler",
    "ConditionalSampler",
    "DEFAULT_RESOLUTION",
]

DEFAULT_RESOLUTION = 1024
MEAN_TOL = 1e-12
_SUB_SHIFT = 20


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class DiscreteLaw:
    """Finite distribution on R^d given by support points and weights."""

    __slots__ = ("values", "probs", "_cdf")

    def __init__(self, values, probs):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        probs = np.asarray(probs, dtype=float).reshape(-1)
        if values.shape[0] != probs.size or probs.size == 0:
            raise ValueError("a discrete law needs one weight per support point")
        self.values = values
        self.probs = probs
        self.values.flags.writeable = False
        self.probs.flags.writeable = False
        self._cdf = np.cumsum(probs)

    @classmethod
    def rademacher(cls, dim: int = 1, direction=None) -> "DiscreteLaw":
        u = np.ones(dim) if direction is None else np.asarray(direction, dtype=float)
        return cls(np.stack([u, -u]), [0.5, 0.5])

    @classmethod
    def point(cls, dim: int = 1) -> "DiscreteLaw":
        return cls(np.zeros((1, dim)), [1.0])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def mean(self) -> np.ndarray:
        return self.probs @ self.values

    def second_moment(self) -> float:
        return float(self.probs @ np.sum(self.values**2, axis=1))

    def jump_mass(self) -> float:
        """Probability of a nonzero jump."""
        return float(self.probs[np.any(self.values != 0, axis=1)].sum())

    def problems(self) -> list:
        out = []
        if np.any(self.probs < 0):
            out.append("negative probability")
        if abs(self.probs.sum() - 1.0) > MEAN_TOL:
            out.append(f"probabilities sum to {self.probs.sum():.15g}")
        if not np.all(np.isfinite(self.values)):
            out.append("non-finite support point")
        m = self.mean()
        if np.max(np.abs(m)) > MEAN_TOL:
            out.append(f"mean ≠ 0 (mean {np.array2string(m, precision=6)})")
        return out

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF sampling from uniforms ``u``; returns (len(u), d)."""
        k = np.searchsorted(self._cdf, u * self._cdf[-1], side="right")
        return self.values[np.minimum(k, self.probs.size - 1)]

    def canonical(self):
        """Merged, sorted support with positive weights (for comparisons)."""
        keep = self.probs > 0
        vals, inv = np.unique(self.values[keep], axis=0, return_inverse=True)
        p = np.zeros(vals.shape[0])
        np.add.at(p, inv.reshape(-1), self.probs[keep])
        return vals, p

    def tv_distance(self, other: "DiscreteLaw") -> float:
        va, pa = self.canonical()
        vb, pb = other.canonical()
        allv, inv = np.unique(np.concatenate([va, vb]), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        qa = np.zeros(allv.shape[0])
        qb = np.zeros(allv.shape[0])
        np.add.at(qa, inv[: va.shape[0]], pa)
        np.add.at(qb, inv[va.shape[0] :], pb)
        return 0.5 * float(np.abs(qa - qb).sum())

    def char(self, xstar) -> complex:
        """``E exp(i<X, x*>)``."""
        return complex(self.probs @ np.exp(1j * (self.values @ np.asarray(xstar, dtype=float))))

    def __eq__(self, other):
        if not isinstance(other, DiscreteLaw):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash((self.values.tobytes(), self.probs.tobytes()))

    def __repr__(self):
        return f"DiscreteLaw(n={self.probs.size}, d={self.dim})"


@dataclass
class SimState:
    """Running state handed to predictable feedback rules.

    The arrays describe, for each path in the batch, the right value of the
    process at grid time ``time`` and the jump history up to it.
    """

    time: float
    index: int
    value: np.ndarray  # (B, d)
    counts: np.ndarray  # (B, m) cumulative atom counts
    lam: np.ndarray  # (B, m) cumulative intensities
    acc: np.ndarray  # (B, k, d) accessible jumps, zero where not yet realized
    n_acc: int

    @property
    def n_jumps(self) -> np.ndarray:
        acc = np.any(self.acc[:, : self.n_acc, :] != 0, axis=2).sum(axis=1)
        return self.counts.sum(axis=1) + acc

    def take(self, index) -> "SimState":
        return SimState(self.time, self.index, self.value[index], self.counts[index], self.lam[index], self.acc[index], self.n_acc)


# feedback rules ------------------------------------------------------------


@dataclass(frozen=True)
class TanhFeedback:
    """``Φ_k = base_k · (1 + κ tanh(<w, M>))`` evaluated at the interval start."""

    kappa: float
    weights: tuple

    kind = "tanh"

    def __call__(self, base: np.ndarray, state: SimState) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        s = 1.0 + self.kappa * np.tanh(state.value @ w)
        return s[:, None, None] * base[None]


@dataclass(frozen=True)
class JumpCountFeedback:
    """``Φ_k = base_k · (1 + κ min(#jumps, cap))``."""

    kappa: float
    cap: int = 1

    kind = "jump_count"

    def __call__(self, base: np.ndarray, state: SimState) -> np.ndarray:
        s = 1.0 + self.kappa * np.minimum(state.n_jumps, self.cap)
        return s[:, None, None] * base[None]


@dataclass(frozen=True)
class AfterFirstJump:
    """Intensity multiplier ``factor`` once any jump has occurred, else 1."""

    factor: float

    kind = "after_first_jump"

    def __call__(self, state: SimState) -> np.ndarray:
        return np.where(state.n_jumps > 0, self.factor, 1.0)


@dataclass(frozen=True)
class CountLinear:
    """Intensity multiplier ``1 + slope · min(#atoms, cap)``."""

    slope: float
    cap: int = 10

    kind = "count_linear"

    def __call__(self, state: SimState) -> np.ndarray:
        return 1.0 + self.slope * np.minimum(state.counts.sum(axis=1), self.cap)


@dataclass(frozen=True)
class ElementaryIntegrand:
    """Piecewise-constant ``d×h`` integrand on a mesh ``0 = t_0 < … < t_K``.

    ``matrices[k]`` applies on ``(t_k, t_{k+1}]``.  When ``feedback`` is set
    the matrix actually used is ``feedback(matrices[k], state at t_k)``, a
    function of the history up to the left endpoint only.  Past ``t_K`` the
    integrand is zero.
    """

    mesh: np.ndarray
    matrices: np.ndarray  # (K, d, h)
    feedback: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "mesh", np.asarray(self.mesh, dtype=float))
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim == 2:
            m = np.broadcast_to(m, (self.mesh.size - 1,) + m.shape).copy()
        object.__setattr__(self, "matrices", m)

    @classmethod
    def constant(cls, horizon: float, matrix) -> "ElementaryIntegrand":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(np.array([0.0, horizon]), m[None])

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.matrices.shape[2]

    @property
    def n_intervals(self) -> int:
        return self.mesh.size - 1


@dataclass(frozen=True)
class ContinuousPart:
    integrand: ElementaryIntegrand
    time_change: TimeChange | None = None

    def clock(self, horizon: float) -> TimeChange:
        return self.time_change if self.time_change is not None else TimeChange.identity(horizon)

    @property
    def deterministic(self) -> bool:
        return self.integrand.feedback is None


@dataclass(frozen=True)
class QlcIntensity:
    """Finite mark alphabet with piecewise-linear cumulative intensities.

    Parameters
    ----------
    marks : (m, d)
    breakpoints : list of (times, values) per mark; ``values[0] = 0``.
    multiplier : optional predictable rule ``state -> (B,)`` or ``(B, m)``
        scaling the intensity increments cell by cell.
    """

    marks: np.ndarray
    breakpoints: tuple
    multiplier: Callable | None = None

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        object.__setattr__(self, "marks", marks)
        bps = tuple((np.asarray(t, dtype=float), np.asarray(v, dtype=float)) for t, v in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def constant_rates(cls, horizon: float, marks, rates, multiplier=None) -> "QlcIntensity":
        marks = np.asarray(marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        rates = np.broadcast_to(np.asarray(rates, dtype=float), (marks.shape[0],))
        bps = [(np.array([0.0, horizon]), np.array([0.0, r * horizon])) for r in rates]
        return cls(marks, tuple(bps), multiplier)

    @property
    def n_marks(self) -> int:
        return self.marks.shape[0]

    @property
    def deterministic(self) -> bool:
        return self.multiplier is None

    def base(self, t) -> np.ndarray:
        """Base cumulative intensities at times ``t``, shape (len(t), m)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, bt, bv) for bt, bv in self.breakpoints], axis=-1) if self.n_marks else np.zeros((t.size, 0))


@dataclass(frozen=True)
class AccessibleKernel:
    """Fixed jump times with history-dependent finite laws.

    ``laws[i]`` is a :class:`DiscreteLaw` (history free), a dict mapping a
    history key to a law (with optional ``None`` key as default), or a
    callable ``history (i, d) array -> DiscreteLaw``.  History keys are
    tuples of tuples of the previous jump vectors.
    """

    times: np.ndarray
    laws: tuple

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float).reshape(-1))
        object.__setattr__(self, "laws", tuple(self.laws))

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def deterministic(self) -> bool:
        return all(isinstance(l, DiscreteLaw) for l in self.laws)

    def law(self, i: int, history: np.ndarray) -> DiscreteLaw:
        spec = self.laws[i]
        if isinstance(spec, DiscreteLaw):
            return spec
        if isinstance(spec, dict):
            key = tuple(tuple(float(x) for x in row) for row in np.asarray(history).reshape(i, -1))
            if key in spec:
                return spec[key]
            if None in spec:
                return spec[None]
            raise KeyError(f"no law for history {key} at accessible time {self.times[i]}")
        return spec(np.asarray(history).reshape(i, -1))

    def reachable(self, dim: int, cap: int = 20000):
        """Enumerate (i, history, law) over reachable histories, up to ``cap`` nodes."""
        frontier = [np.zeros((0, dim))]
        out = []
        for i in range(self.n_times):
            nxt = []
            for h in frontier:
                law = self.law(i, h)
                out.append((i, h, law))
                if len(out) > cap:
                    return out, False
                if i + 1 < self.n_times:
                    for v, p in zip(law.values, law.probs):
                        if p > 0:
                            nxt.append(np.vstack([h, v[None]]))
            frontier = nxt
        return out, True


@dataclass(frozen=True)
class MartingaleModel:
    """``M = M^c + M^q + M^a`` on ``[0, horizon]`` in R^dim."""

    dim: int
    horizon: float
    continuous: ContinuousPart | None = None
    qlc: QlcIntensity | None = None
    accessible: AccessibleKernel | None = None
    name: str = ""

    @property
    def is_zero(self) -> bool:
        return self.continuous is None and self.qlc is None and self.accessible is None

    @property
    def deterministic(self) -> bool:
        """True when the local characteristics do not depend on the path."""
        return all(p is None or p.deterministic for p in (self.continuous, self.qlc, self.accessible))

    @property
    def n_marks(self) -> int:
        return 0 if self.qlc is None else self.qlc.n_marks

    @property
    def noise_dim(self) -> int:
        return 0 if self.continuous is None else self.continuous.integrand.noise_dim

    @property
    def n_acc(self) -> int:
        return 0 if self.accessible is None else self.accessible.n_times

    def parts_present(self) -> list:
        return [n for n, p in (("continuous", self.continuous), ("qlc", self.qlc), ("accessible", self.accessible)) if p is not None]


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _check_pl(times, values, name: str, T: float) -> list:
    out = []
    if times.ndim != 1 or times.shape != values.shape or times.size < 2:
        return [f"{name}: breakpoint arrays malformed"]
    if times[0] != 0.0 or values[0] != 0.0:
        out.append(f"{name}: must start at (0, 0)")
    dt = np.diff(times)
    dv = np.diff(values)
    if np.any(dt < 0):
        out.append(f"{name}: breakpoint times not increasing")
    if np.any((dt == 0) & (dv != 0)):
        out.append(f"{name}: not continuous (atom in time)")
    if np.any(dv < 0):
        out.append(f"{name}: not nondecreasing")
    if times[-1] < T - KNOT_TOL:
        out.append(f"{name}: breakpoints end before the horizon")
    if not np.all(np.isfinite(values)):
        out.append(f"{name}: non-finite value")
    return out


def validate(model: MartingaleModel) -> list:
    """List of invariant violations (empty list means valid)."""
    out = []
    T, d = model.horizon, model.dim
    if not T > 0:
        out.append("horizon must be positive")
    if d < 1:
        out.append("dimension must be at least 1")
    if model.continuous is not None:
        itg = model.continuous.integrand
        mesh = itg.mesh
        if mesh.size < 2 or mesh[0] != 0.0 or np.any(np.diff(mesh) <= 0) or mesh[-1] > T + KNOT_TOL:
            out.append("continuous: integrand mesh must satisfy 0 = t_0 < … < t_K ≤ T")
        if itg.matrices.ndim != 3 or itg.matrices.shape[0] != mesh.size - 1:
            out.append("continuous: one matrix per mesh interval required")
        elif itg.matrices.shape[1] != d:
            out.append(f"continuous: integrand rows {itg.matrices.shape[1]} ≠ dimension {d}")
        if not np.all(np.isfinite(itg.matrices)):
            out.append("continuous: non-finite integrand entry")
        if itg.feedback is not None and not callable(itg.feedback):
            out.append("continuous: feedback must be callable")
        tc = model.continuous.time_change
        if tc is not None and abs(tc.horizon - T) > KNOT_TOL:
            out.append("continuous: time change must be defined on [0, T]")
    if model.qlc is not None:
        q = model.qlc
        if q.marks.ndim != 2 or q.marks.shape[1] != d:
            out.append("qlc: marks must be vectors in R^d")
        elif np.any(np.all(q.marks == 0, axis=1)):
            out.append("qlc: zero mark")
        if len(q.breakpoints) != q.n_marks:
            out.append("qlc: one intensity per mark required")
        for j, (bt, bv) in enumerate(q.breakpoints):
            out.extend(_check_pl(bt, bv, f"qlc intensity {j + 1}", T))
    if model.accessible is not None:
        a = model.accessible
        s = a.times
        if s.size != len(a.laws):
            out.append("accessible: one law specification per time required")
        if s.size and (s[0] <= 0 or s[-1] > T + KNOT_TOL or np.any(np.diff(s) <= 0)):
            out.append("accessible: times must satisfy 0 < s_1 < … < s_k ≤ T")
        if s.size == len(a.laws):
            try:
                nodes, complete = a.reachable(d)
            except Exception as exc:  # malformed tables
                out.append(f"accessible: {exc}")
                nodes, complete = [], True
            seen = set()
            for i, h, law in nodes:
                if id(law) in seen:
                    continue
                seen.add(id(law))
                if law.dim != d:
                    out.append(f"accessible time {s[i]:g}: law dimension {law.dim} ≠ {d}")
                    continue
                for p in law.problems():
                    out.append(f"accessible time {s[i]:g}: {p}")
            if not complete:
                out.append("accessible: reachable histories truncated during validation")
    return out


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


def build_grid(model: MartingaleModel, resolution: int = DEFAULT_RESOLUTION, extra_times=()) -> np.ndarray:
    """Simulation grid: uniform points plus every time the model needs exactly.

    Required times (model breakpoints, accessible times, ``extra_times``)
    are kept exactly; uniform points closer than the knot tolerance to a
    required time are dropped.
    """
    T = model.horizon
    req = [np.array([0.0, T]), np.asarray(list(extra_times), dtype=float)]
    if model.continuous is not None:
        req.append(model.continuous.integrand.mesh)
        if model.continuous.time_change is not None:
            req.append(model.continuous.time_change.times)
    if model.qlc is not None:
        for bt, _ in model.qlc.breakpoints:
            req.append(bt[bt <= T])
    if model.accessible is not None:
        req.append(model.accessible.times)
    req = merge_times(*req)
    if np.any(req < -KNOT_TOL) or np.any(req > T + KNOT_TOL):
        raise ValueError("required grid time outside [0, T]")
    req = req[(req >= 0) & (req <= T)]
    if resolution and resolution > 0:
        n = int(np.ceil(resolution * T - 1e-9))
        uni = np.linspace(0.0, T, n + 1)
        pos = np.clip(np.searchsorted(req, uni), 1, req.size - 1)
        dist = np.minimum(np.abs(uni - req[pos - 1]), np.abs(uni - req[pos]))
        grid = np.sort(np.concatenate([req, uni[dist > KNOT_TOL]]))
    else:
        grid = req
    return grid


def _grid_indices(grid: np.ndarray, times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    idx = np.clip(np.searchsorted(grid, times - KNOT_TOL), 0, grid.size - 1)
    if np.any(np.abs(grid[idx] - times) > KNOT_TOL):
        raise ValueError("time not on the simulation grid")
    return idx


@dataclass(frozen=True)
class _GridPlan:
    grid: np.ndarray
    dt: np.ndarray
    clock: np.ndarray  # A at grid points
    d_clock: np.ndarray
    cell_interval: np.ndarray  # integrand interval per cell, -1 past the mesh
    mesh_index: np.ndarray  # grid index of each integrand interval start
    base_lam: np.ndarray  # (G+1, m) base cumulative intensities
    acc_index: np.ndarray

    @classmethod
    def make(cls, model: MartingaleModel, grid: np.ndarray) -> "_GridPlan":
        G = grid.size - 1
        if model.continuous is not None:
            itg = model.continuous.integrand
            clock = model.continuous.clock(model.horizon)(grid)
            mesh_index = _grid_indices(grid, itg.mesh)
            ci = np.searchsorted(itg.mesh, grid[:-1] + KNOT_TOL, side="right") - 1
            ci[ci >= itg.n_intervals] = -1
        else:
            clock = np.zeros(grid.size)
            mesh_index = np.zeros(0, dtype=np.int64)
            ci = -np.ones(G, dtype=np.int64)
        base = model.qlc.base(grid) if model.qlc is not None else np.zeros((grid.size, 0))
        acc = _grid_indices(grid, model.accessible.times) if model.n_acc else np.zeros(0, dtype=np.int64)
        return cls(grid, np.diff(grid), clock, np.diff(clock), ci, mesh_index, base, acc)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class SimulationTrace:
    """Everything realized by a batch simulation.

    Attributes
    ----------
    phi : (B, K, d, h) integrand matrix used on each mesh interval
    clock : (G+1,) continuous-part clock ``A`` at grid points
    mc : (B, G+1, d) continuous part at grid points, or None
    lam : (B, G+1, m) realized cumulative intensities
    counts : (B, G+1, m) cumulative atom counts
    atom_path, atom_time, atom_mark : atoms sorted by (path, time)
    acc_jumps : (B, k, d) realized accessible jumps
    acc_law_ids : (B, k) index into ``acc_laws[i]`` of the law each path used
    acc_laws : per accessible time, the list of distinct realized laws
    streams : labels of the substreams consumed
    """

    model: MartingaleModel
    seed: int
    path_ids: np.ndarray
    grid: np.ndarray
    clock: np.ndarray
    phi: np.ndarray | None
    mc: np.ndarray | None
    lam: np.ndarray | None
    counts: np.ndarray | None
    atom_path: np.ndarray
    atom_time: np.ndarray
    atom_mark: np.ndarray
    acc_index: np.ndarray
    acc_jumps: np.ndarray | None
    acc_law_ids: np.ndarray | None
    acc_laws: list
    streams: tuple = ()
    _bundle: PathBundle | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return self.path_ids.size

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def n_paths(self) -> int:
        return self.path_ids.size

    @property
    def bundle(self) -> PathBundle:
        if self._bundle is None:
            m = self.model
            self._bundle = PathBundle(
                grid=self.grid,
                dim=m.dim,
                n_paths=self.n_paths,
                continuous=self.mc,
                marks=m.qlc.marks if m.qlc is not None else np.zeros((0, m.dim)),
                compensator=self.lam,
                counts=self.counts,
                atom_path=self.atom_path,
                atom_time=self.atom_time,
                atom_mark=self.atom_mark,
                acc_index=self.acc_index,
                acc_jumps=self.acc_jumps,
            )
        return self._bundle

    def path(self, i: int = 0) -> CadlagPath:
        return self.bundle.path(i)

    def acc_law(self, b: int, i: int) -> DiscreteLaw:
        return self.acc_laws[i][int(self.acc_law_ids[b, i])]

    def __getitem__(self, index) -> "SimulationTrace":
        """Sub-trace of batch positions ``index`` (an int gives a single path)."""
        idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
        sub = self.bundle.select(idx)

        def pick(a):
            return None if a is None else a[idx]

        return SimulationTrace(
            model=self.model,
            seed=self.seed,
            path_ids=self.path_ids[idx],
            grid=self.grid,
            clock=self.clock,
            phi=pick(self.phi),
            mc=pick(self.mc),
            lam=pick(self.lam),
            counts=pick(self.counts),
            atom_path=sub.atom_path,
            atom_time=sub.atom_time,
            atom_mark=sub.atom_mark,
            acc_index=self.acc_index,
            acc_jumps=pick(self.acc_jumps),
            acc_law_ids=pick(self.acc_law_ids),
            acc_laws=self.acc_laws,
            streams=self.streams,
            _bundle=sub,
        )


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


def _sub(mark, rank):
    return (np.asarray(mark, dtype=np.uint64) << np.uint64(_SUB_SHIFT)) + np.asarray(rank, dtype=np.uint64)


def _draw_accessible(model, plan, pids, stream, start, stop, acc):
    """Accessible jumps at grid indices in (start, stop]; fills ``acc`` in place."""
    B = pids.size
    k = model.n_acc
    law_ids = -np.ones((B, k), dtype=np.int64)
    laws = [[] for _ in range(k)]
    for i in range(k):
        g = plan.acc_index[i]
        if not (start < g <= stop):
            continue
        hist = acc[:, :i, :].reshape(B, -1)
        u = stream.uniform(pids, event=i)
        spec = model.accessible.laws[i]
        if isinstance(spec, DiscreteLaw) or i == 0:
            groups, inv = hist[:1], np.zeros(B, dtype=np.int64)
        else:
            groups, inv = np.unique(hist, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
        for gi in range(len(groups)):
            law = model.accessible.law(i, groups[gi].reshape(i, model.dim))
            sel = inv == gi
            acc[sel, i, :] = law.sample(u[sel])
            law_ids[sel, i] = len(laws[i])
            laws[i].append(law)
    return law_ids, laws


def _evolve(model, plan, pids, start, stop, state, phi, streams):
    """Run the continuous and q.l.c. parts over grid indices [start, stop].

    ``state`` is the :class:`SimState` at ``start`` (including accessible
    jumps already realized there) and ``phi`` the (B, K, d, h) integrand
    array with entries for intervals starting before ``start`` filled in.
    Accessible jumps in ``(start, stop]`` must already be present in
    ``state.acc``.
    """
    B, d = pids.size, model.dim
    L = stop - start
    m = model.n_marks
    cstream, qstream = streams
    mc = np.zeros((B, L + 1, d))
    mc[:, 0] = state.value - (state.counts - state.lam) @ (model.qlc.marks if m else np.zeros((0, d))) - _acc_before(model, plan, state.acc, start)
    lam = np.zeros((B, L + 1, m))
    cnt = np.zeros((B, L + 1, m), dtype=np.int64)
    lam[:, 0] = state.lam
    cnt[:, 0] = state.counts
    if L == 0:
        return mc, lam, cnt

    cont = model.continuous
    feedback = cont is not None and cont.integrand.feedback is not None
    multiplier = model.qlc is not None and model.qlc.multiplier is not None
    cuts = {start, stop}
    if feedback:
        cuts.update(int(g) for g in plan.mesh_index[:-1] if start <= g < stop)
    if multiplier:
        cuts.update(range(start, stop))
    cuts = sorted(cuts)
    marks = model.qlc.marks if m else np.zeros((0, d))
    mesh_pos = {int(g): k for k, g in enumerate(plan.mesh_index[:-1])} if cont is not None else {}

    for g0, g1 in zip(cuts[:-1], cuts[1:]):
        r0, r1 = g0 - start, g1 - start
        if feedback or multiplier:
            acc_cum = _acc_before(model, plan, state.acc, g0)
            value = mc[:, r0] + (cnt[:, r0] - lam[:, r0]) @ marks + acc_cum
            n_acc = int(np.sum(plan.acc_index <= g0))
            past = state.acc.copy()
            past[:, n_acc:] = 0.0
            st = SimState(float(plan.grid[g0]), g0, value, cnt[:, r0], lam[:, r0], past, n_acc)
        cells = np.arange(g0, g1)
        # continuous part
        if cont is not None:
            if feedback and g0 in mesh_pos:
                k = mesh_pos[g0]
                phi[:, k] = cont.integrand.feedback(cont.integrand.matrices[k], st)
            ci = plan.cell_interval[cells]
            live = (ci >= 0) & (plan.d_clock[cells] > 0)
            inc = np.zeros((B, cells.size, d))
            if np.any(live):
                h = cont.integrand.noise_dim
                lc = cells[live]
                z = cstream.normal(pids[:, None, None], lc[None, :, None], np.arange(h)[None, None, :])
                z *= np.sqrt(plan.d_clock[lc])[None, :, None]
                inc[:, live] = np.einsum("bcdh,bch->bcd", phi[:, ci[live]], z)
            mc[:, r0 + 1 : r1 + 1] = mc[:, r0 : r0 + 1] + np.cumsum(inc, axis=1)
        # quasi-left-continuous part
        if m:
            dbase = np.diff(plan.base_lam[g0 : g1 + 1], axis=0)  # (cells, m)
            if multiplier:
                mult = np.asarray(model.qlc.multiplier(st), dtype=float)
                mult = np.broadcast_to(mult[:, None] if mult.ndim == 1 else mult, (B, m))
                dlam = dbase[None, :, :] * mult[:, None, :]
            else:
                dlam = np.broadcast_to(dbase[None], (B, cells.size, m))
            jj = np.arange(m)
            n = qstream.poisson(dlam, pids[:, None, None], cells[None, :, None], _sub(jj, 0)[None, None, :])
            lam[:, r0 + 1 : r1 + 1] = lam[:, r0 : r0 + 1] + np.cumsum(dlam, axis=1)
            cnt[:, r0 + 1 : r1 + 1] = cnt[:, r0 : r0 + 1] + np.cumsum(n, axis=1)
    return mc, lam, cnt


def _acc_before(model, plan, acc, g):
    """Sum of accessible jumps at grid indices ≤ g."""
    if model.n_acc == 0:
        return 0.0
    sel = plan.acc_index <= g
    return acc[:, sel, :].sum(axis=1)


def place_atoms(grid, counts_inc, pids, stream, cell_offset=0):
    """Atom times for per-cell counts, uniform within each cell.

    With intensities linear in each cell this is the conditional law of the
    arrivals of a time-changed unit Poisson process given the cell counts.

    Parameters
    ----------
    counts_inc : (B, C, m) integer counts for cells ``cell_offset + c``

    Returns
    -------
    path, time, mark, cell arrays sorted by (path, time)
    """
    b, c, j = np.nonzero(counts_inc)
    n = counts_inc[b, c, j]
    if n.size == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, np.zeros(0), e, e
    rb, rc, rj = np.repeat(b, n), np.repeat(c, n), np.repeat(j, n)
    ends = np.cumsum(n)
    rank = np.arange(ends[-1]) - np.repeat(ends - n, n) + 1
    cell = rc + cell_offset
    u = stream.uniform(pids[rb], cell, _sub(rj, rank))
    lo, hi = grid[cell], grid[cell + 1]
    t = lo + u * (hi - lo)
    # keep atoms strictly inside their cell so they never meet a grid time
    t = np.minimum(np.maximum(t, np.nextafter(lo, np.inf)), np.nextafter(hi, -np.inf))
    order = np.lexsort((t, rb))
    return rb[order], t[order], rj[order], cell[order]


def _initial_state(model, B):
    d, m, k = model.dim, model.n_marks, model.n_acc
    return SimState(0.0, 0, np.zeros((B, d)), np.zeros((B, m), dtype=np.int64), np.zeros((B, m)), np.zeros((B, k, d)), 0)


def _phi_init(model, B):
    if model.continuous is None:
        return None
    itg = model.continuous.integrand
    if itg.feedback is None:
        return np.broadcast_to(itg.matrices[None], (B,) + itg.matrices.shape)
    return np.full((B,) + itg.matrices.shape, np.nan)


def simulate_batch(
    model: MartingaleModel,
    seed: int,
    path_ids,
    resolution: int = DEFAULT_RESOLUTION,
    extra_times=(),
    grid=None,
) -> SimulationTrace:
    """Simulate the paths with the given ids; returns the batch trace."""
    problems = validate(model)
    if problems:
        raise ValueError("invalid model: " + "; ".join(problems))
    pids = np.asarray(path_ids, dtype=np.int64).reshape(-1)
    if grid is None:
        grid = build_grid(model, resolution, extra_times)
    plan = _GridPlan.make(model, grid)
    B, G = pids.size, grid.size - 1
    streams = {k: Stream(seed, k) for k in ("continuous", "qlc", "accessible")}
    state = _initial_state(model, B)
    law_ids, laws = None, []
    if model.n_acc:
        law_ids, laws = _draw_accessible(model, plan, pids, streams["accessible"], 0, G, state.acc)
    phi = _phi_init(model, B)
    mc, lam, cnt = _evolve(model, plan, pids, 0, G, state, phi, (streams["continuous"], streams["qlc"]))
    if model.n_marks:
        ap, at, am, _ = place_atoms(grid, np.diff(cnt, axis=1), pids, streams["qlc"])
    else:
        ap = am = np.zeros(0, dtype=np.int64)
        at = np.zeros(0)
    used = [s.label for k, s in streams.items() if (k == "continuous" and model.continuous) or (k == "qlc" and model.qlc) or (k == "accessible" and model.accessible)]
    return SimulationTrace(
        model=model,
        seed=int(seed),
        path_ids=pids,
        grid=grid,
        clock=plan.clock,
        phi=phi,
        mc=mc if model.continuous is not None else None,
        lam=lam if model.n_marks else None,
        counts=cnt if model.n_marks else None,
        atom_path=ap,
        atom_time=at,
        atom_mark=am,
        acc_index=plan.acc_index,
        acc_jumps=state.acc if model.n_acc else None,
        acc_law_ids=law_ids,
        acc_laws=laws,
        streams=tuple(used),
    )


def simulate(model: MartingaleModel, seed: int, resolution: int = DEFAULT_RESOLUTION, path_id: int = 0, extra_times=()):
    """Simulate one path; returns ``(CadlagPath, SimulationTrace)``."""
    trace = simulate_batch(model, seed, [path_id], resolution, extra_times)
    return trace.path(0), trace


def chunk_size(model: MartingaleModel, n_grid: int, budget: int = 4_000_000) -> int:
    width = max(model.dim, model.noise_dim, model.n_marks, 1) * (2 if model.continuous is not None else 1)
    return int(max(1, min(20000, budget // max(1, n_grid * width))))


def iter_batches(model: MartingaleModel, seed: int, n_paths: int, resolution: int = DEFAULT_RESOLUTION, extra_times=(), chunk: int | None = None, grid=None):
    """Yield batch traces covering path ids ``0 .. n_paths-1`` in order."""
    if grid is None:
        grid = build_grid(model, resolution, extra_times)
    if chunk is None:
        chunk = chunk_size(model, grid.size)
    for lo in range(0, n_paths, chunk):
        yield simulate_batch(model, seed, np.arange(lo, min(n_paths, lo + chunk)), grid=grid)


# ---------------------------------------------------------------------------
# regeneration from a frozen state
# ---------------------------------------------------------------------------


def state_at(trace: SimulationTrace, g: int) -> SimState:
    """The running state of every path at grid index ``g``."""
    model = trace.model
    B, d, m, k = trace.n_paths, model.dim, model.n_marks, model.n_acc
    if not 0 <= g < trace.grid.size:
        raise ValueError("grid index beyond the realized trace")
    value = trace.bundle.values()[:, g, :]
    counts = trace.counts[:, g] if m else np.zeros((B, 0), dtype=np.int64)
    lam = trace.lam[:, g] if m else np.zeros((B, 0))
    acc = np.zeros((B, k, d))
    n_acc = int(np.sum(trace.acc_index <= g)) if k else 0
    if k:
        acc[:, :n_acc] = trace.acc_jumps[:, :n_acc]
    return SimState(float(trace.grid[g]), g, value, counts, lam, acc, n_acc)


def regenerate(trace: SimulationTrace, start: float, stop: float, seed: int, extra=(), draw_ids=None, source=None):
    """Re-simulate every path of ``trace`` over ``(start, stop]`` from its frozen state.

    Parameters
    ----------
    draw_ids : optional ids for the fresh randomness (default: the path ids)
    source : optional batch positions (same length as ``draw_ids``) selecting
        which frozen path each draw continues; defaults to ``arange(B)``.

    Returns
    -------
    (B', d) increments ``M_stop - M_start`` drawn from the conditional law
    given the history up to ``start``.
    """
    model = trace.model
    grid = trace.grid
    plan = _GridPlan.make(model, grid)
    g0, g1 = _grid_indices(grid, [start, stop])
    if g1 < g0:
        raise ValueError("window end precedes its start")
    src = np.arange(trace.n_paths) if source is None else np.asarray(source, dtype=np.int64)
    pids = trace.path_ids[src] if draw_ids is None else np.asarray(draw_ids, dtype=np.int64)
    st = state_at(trace, int(g0)).take(src)
    st.acc = st.acc.copy()
    extra = tuple(int(e) for e in extra)
    streams = {k: Stream(seed, "regenerate-" + k, *extra) for k in ("continuous", "qlc", "accessible")}
    if model.n_acc:
        _draw_accessible(model, plan, pids, streams["accessible"], int(g0), int(g1), st.acc)
    phi = None
    if trace.phi is not None:
        phi = np.array(trace.phi[src], copy=True)
        if model.continuous.integrand.feedback is not None:
            later = plan.mesh_index[:-1] >= g0
            phi[:, later] = np.nan
    mc, lam, cnt = _evolve(model, plan, pids, int(g0), int(g1), st, phi, (streams["continuous"], streams["qlc"]))
    marks = model.qlc.marks if model.n_marks else np.zeros((0, model.dim))
    inc = (mc[:, -1] - mc[:, 0]) + ((cnt[:, -1] - cnt[:, 0]) - (lam[:, -1] - lam[:, 0])) @ marks
    if model.n_acc:
        sel = (plan.acc_index > g0) & (plan.acc_index <= g1)
        inc = inc + st.acc[:, sel, :].sum(axis=1)
    return inc


class ConditionalSampler:
    """Sampler of ``M_t - M_s`` given the frozen history of one path up to ``s``."""

    def __init__(self, trace: SimulationTrace, index: int, s: float, seed: int):
        if s > trace.horizon + KNOT_TOL or s < 0:
            raise ValueError("conditioning time beyond the realized trace")
        _grid_indices(trace.grid, [s])
        self.trace = trace
        self.index = int(index)
        self.s = float(s)
        self.seed = int(seed)

    def sample(self, t: float, n_draws: int, offset: int = 0) -> np.ndarray:
        """``n_draws`` independent increments, shape (n_draws, d)."""
        ids = np.arange(offset, offset + n_draws)
        src = np.full(n_draws, self.index)
        return regenerate(self.trace, self.s, t, self.seed, extra=(self.index,), draw_ids=ids, source=src)


def conditional_increment_law_sampler(model: MartingaleModel, trace: SimulationTrace, s: float, seed: int, index: int = 0) -> ConditionalSampler:
    if trace.model is not model:
        raise ValueError("trace was not produced by this model")
    return ConditionalSampler(trace, index, s, seed)
