"""Decoupled tangent constructions.

Given a simulation trace, the decoupled tangent martingale ``N`` is built
from the frozen records of the trace and fresh randomness only:

* ``N^c``: the realized integrand ``Φ(ω)`` integrated against new Gaussian
  noise on the same clock;
* ``N^q``: a Cox process directed by the realized intensities, compensated
  by those same intensities;
* ``N^a``: at each accessible time, a fresh draw from the conditional law
  evaluated at the original history.

The three parts use disjoint substream tags, so conditionally on the trace
they are independent and each has independent increments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .characteristics import CompensatorRecord, JumpMeasure, LocalCharacteristics, characteristics_of
from .models import (
    DEFAULT_RESOLUTION,
    MartingaleModel,
    SimulationTrace,
    _GridPlan,
    _sub,
    build_grid,
    place_atoms,
    regenerate,
    simulate_batch,
)
from .paths import CadlagPath, PathBundle, TimeChange
from .rng import Stream

__all__ = [
    "DecoupledDraw",
    "cox_process",
    "cox_counts",
    "decouple_continuous",
    "decouple_qlc",
    "decouple_accessible",
    "decoupled_tangent",
    "jkw_discretize_and_decouple",
    "jkw_batch",
    "JkwBatch",
]


@dataclass
class DecoupledDraw:
    """A decoupled tangent draw for every path of a parent trace.

    ``record`` is a trace-shaped object holding the realized values of
    ``N`` together with copies of the frozen integrand, intensities and
    conditional laws of the parent, so the characteristics of ``N`` are
    read off its own record.
    """

    parent: SimulationTrace
    seed: int
    record: SimulationTrace

    @property
    def bundle(self) -> PathBundle:
        return self.record.bundle

    @property
    def streams(self) -> tuple:
        return self.record.streams

    def __len__(self):
        return self.record.n_paths

    def path(self, i: int = 0) -> CadlagPath:
        return self.record.path(i)

    def parts(self, i: int = 0):
        """``(N^c, N^q, N^a)`` of path ``i``; the tags of the three constructions."""
        return self.record.bundle.parts(i)

    def characteristics(self, i: int = 0) -> LocalCharacteristics:
        return characteristics_of(self.record.model, self.record, i)


def cox_counts(lam: np.ndarray, pids: np.ndarray, stream: Stream) -> np.ndarray:
    """Per-cell Poisson counts for cumulative intensities ``lam`` (B, G+1, m)."""
    dlam = np.diff(lam, axis=1)
    if np.any(dlam < -1e-12):
        raise ValueError("intensity is decreasing")
    G, m = dlam.shape[1], dlam.shape[2]
    cells = np.arange(G)
    return stream.poisson(np.maximum(dlam, 0.0), pids[:, None, None], cells[None, :, None], _sub(np.arange(m), 0)[None, None, :])


def cox_process(comp: CompensatorRecord, seed: int, path_id: int = 0, horizon: float | None = None) -> JumpMeasure:
    """Cox process directed by the non-atomic part of ``comp``.

    For each mark a fresh unit-rate Poisson process on the line is drawn
    (exponential gaps) and its arrivals ``e`` are mapped to times through
    the generalized inverse of ``Λ_j``.
    """
    if not comp.is_continuous():
        raise ValueError("compensator is not continuous in time")
    if comp.n_marks and np.any(np.diff(comp.lam_values, axis=0) < 0):
        raise ValueError("compensator is not nondecreasing")
    T = float(comp.lam_times[-1]) if horizon is None else float(horizon)
    stream = Stream(seed, "cox")
    times, marks = [], []
    for j in range(comp.n_marks):
        total = float(comp.lam(T)[j])
        if total <= 0:
            continue
        tc = TimeChange(comp.lam_times, comp.lam_values[:, j])
        arrivals = []
        level, k = 0.0, 0
        block = max(16, int(2 * total + 16))
        while level <= total:
            u = stream.uniform(np.uint64(path_id), np.arange(k, k + block), _sub(j, 0))
            e = level + np.cumsum(-np.log(u))
            arrivals.append(e[e <= total])
            level, k = float(e[-1]), k + block
        e = np.concatenate(arrivals)
        t = tc.inverse(e)
        times.append(t)
        marks.append(np.repeat(comp.marks[j][None], t.size, axis=0))
    if not times:
        d = comp.marks.shape[1] if comp.marks.ndim == 2 else 1
        return JumpMeasure(np.zeros(0), np.zeros((0, d)))
    t = np.concatenate(times)
    x = np.concatenate(marks)
    order = np.argsort(t, kind="stable")
    return JumpMeasure(t[order], x[order])


def decoupled_tangent(trace: SimulationTrace, seed: int) -> DecoupledDraw:
    """Sum of the three decoupled constructions for every path in ``trace``."""
    model = trace.model
    grid = trace.grid
    plan = _GridPlan.make(model, grid)
    pids = trace.path_ids
    B, d = pids.size, model.dim
    used = []

    mc = None
    if model.continuous is not None:
        s = Stream(seed, "decoupled-continuous")
        used.append(s.label)
        ci = plan.cell_interval
        live = (ci >= 0) & (plan.d_clock > 0)
        cells = np.nonzero(live)[0]
        h = model.noise_dim
        inc = np.zeros((B, grid.size - 1, d))
        if cells.size:
            z = s.normal(pids[:, None, None], cells[None, :, None], np.arange(h)[None, None, :])
            z *= np.sqrt(plan.d_clock[cells])[None, :, None]
            inc[:, cells] = np.einsum("bcdh,bch->bcd", trace.phi[:, ci[cells]], z)
        mc = np.zeros((B, grid.size, d))
        mc[:, 1:] = np.cumsum(inc, axis=1)

    counts = None
    ap = am = np.zeros(0, dtype=np.int64)
    at = np.zeros(0)
    if model.n_marks:
        s = Stream(seed, "cox")
        used.append(s.label)
        n = cox_counts(trace.lam, pids, s)
        counts = np.zeros_like(trace.counts)
        counts[:, 1:] = np.cumsum(n, axis=1)
        ap, at, am, _ = place_atoms(grid, n, pids, s)

    acc = None
    if model.n_acc:
        s = Stream(seed, "decoupled-accessible")
        used.append(s.label)
        acc = np.zeros_like(trace.acc_jumps)
        for i in range(model.n_acc):
            u = s.uniform(pids, event=i)
            ids = trace.acc_law_ids[:, i]
            for l, law in enumerate(trace.acc_laws[i]):
                sel = ids == l
                if np.any(sel):
                    acc[sel, i, :] = law.sample(u[sel])

    record = SimulationTrace(
        model=model,
        seed=int(seed),
        path_ids=pids,
        grid=grid,
        clock=trace.clock.copy(),
        phi=None if trace.phi is None else np.array(trace.phi, copy=True),
        mc=mc,
        lam=None if trace.lam is None else trace.lam.copy(),
        counts=counts,
        atom_path=ap,
        atom_time=at,
        atom_mark=am,
        acc_index=trace.acc_index,
        acc_jumps=acc,
        acc_law_ids=None if trace.acc_law_ids is None else trace.acc_law_ids.copy(),
        acc_laws=[list(l) for l in trace.acc_laws],
        streams=tuple(used),
    )
    return DecoupledDraw(trace, int(seed), record)


def decouple_continuous(trace: SimulationTrace, seed: int, index: int = 0) -> CadlagPath:
    """``N^c`` for path ``index``; the zero path when there is no continuous part."""
    return decoupled_tangent(trace[index], seed).parts(0)[0]


def decouple_qlc(trace: SimulationTrace, seed: int, index: int = 0) -> CadlagPath:
    """``N^q = Σ_{Cox atoms} x_j - Σ_j x_j Λ_j(ω)`` for path ``index``."""
    return decoupled_tangent(trace[index], seed).parts(0)[1]


def decouple_accessible(trace: SimulationTrace, seed: int, index: int = 0) -> CadlagPath:
    """``N^a`` for path ``index``: fresh jumps from the realized conditional laws."""
    return decoupled_tangent(trace[index], seed).parts(0)[2]


# ---------------------------------------------------------------------------
# discretized decoupled sequences
# ---------------------------------------------------------------------------


@dataclass
class JkwBatch:
    """Decoupled tangent sequence of the ``n``-step discretization.

    ``values[b, k]`` is ``M̃^n`` at ``T k / n`` (so ``values[:, 0] = 0``);
    the path is constant in between.
    """

    n: int
    times: np.ndarray
    values: np.ndarray  # (B, n+1, d)
    trace: SimulationTrace

    def path(self, i: int = 0) -> CadlagPath:
        v = self.values[i]
        jumps = np.diff(v, axis=0)
        return CadlagPath.step(float(self.times[-1]), self.times[1:], jumps, dim=v.shape[1])

    def sup(self, func) -> np.ndarray:
        return func(self.values).max(axis=1)


def jkw_grid(model: MartingaleModel, n_list, resolution: int) -> np.ndarray:
    T = model.horizon
    extra = np.concatenate([np.arange(n + 1) * (T / n) for n in n_list])
    return build_grid(model, resolution, extra)


def jkw_batch(trace: SimulationTrace, n: int, seed: int) -> JkwBatch:
    """For every path of the trace, regenerate each block increment from its frozen start."""
    if n < 1:
        raise ValueError("n must be at least 1")
    model = trace.model
    T = model.horizon
    times = np.arange(n + 1) * (T / n)
    times[-1] = T
    d = model.dim
    inc = np.zeros((trace.n_paths, n, d))
    for k in range(1, n + 1):
        inc[:, k - 1] = regenerate(trace, times[k - 1], times[k], seed, extra=(n, k))
    values = np.zeros((trace.n_paths, n + 1, d))
    values[:, 1:] = np.cumsum(inc, axis=1)
    return JkwBatch(n, times, values, trace)


def jkw_discretize_and_decouple(model: MartingaleModel, T: float, n: int, seed: int, path_id: int = 0, resolution: int = DEFAULT_RESOLUTION) -> CadlagPath:
    """Simulate ``M`` once and return the step path ``Σ_{Tk/n ≤ t} d̃_k^n``."""
    if abs(T - model.horizon) > 1e-12:
        raise ValueError("T must equal the model horizon")
    grid = jkw_grid(model, [n], resolution)
    trace = simulate_batch(model, seed, [path_id], grid=grid)
    return jkw_batch(trace, n, seed).path(0)
