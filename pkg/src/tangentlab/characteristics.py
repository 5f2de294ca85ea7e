"""Jump measures, local characteristics, tangency and the exponential formula.

The local characteristics of a simulated path are the covariation of its
continuous part, ``t -> ∫_0^t Φ Φ^T dA``, and the compensator of its jump
measure.  The compensator splits into a non-atomic piece (marks with
cumulative intensities) and predictable atoms at the accessible times,
each carrying the conditional law of the jump there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import DiscreteLaw, MartingaleModel, SimulationTrace, _GridPlan, build_grid
from .paths import KNOT_TOL, CadlagPath, merge_times

__all__ = [
    "JumpMeasure",
    "CompensatorRecord",
    "LocalCharacteristics",
    "ExponentialValue",
    "jump_measure",
    "characteristics_of",
    "model_characteristics",
    "canonical_decomposition",
    "is_tangent",
    "exponential_characteristics",
    "compensated_integral",
    "DEFAULT_TANGENCY_TOL",
]

DEFAULT_TANGENCY_TOL = 1e-9
LINEAR_TERM_TOL = 1e-10
UNDERFLOW = 1e-300


@dataclass(frozen=True)
class JumpMeasure:
    """Finite list of atoms ``(t_i, x_i)`` with nonzero marks."""

    times: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        x = np.asarray(self.marks, dtype=float)
        x = x.reshape(t.size, -1) if x.size else np.zeros((t.size, x.shape[-1] if x.ndim == 2 else 1))
        if np.any(np.diff(t) <= 0):
            raise ValueError("atom times must be strictly increasing")
        if t.size and np.any(np.all(x == 0, axis=1)):
            raise ValueError("jump measure atoms must have nonzero marks")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", x)

    def __len__(self):
        return self.times.size

    def count(self, t: float) -> int:
        return int(np.searchsorted(self.times, t + KNOT_TOL, side="right"))


@dataclass(frozen=True)
class CompensatorRecord:
    """Compensator ``ν`` of a jump measure.

    Attributes
    ----------
    marks : (m, d) mark alphabet of the non-atomic component
    lam_times : (n,) breakpoints of the cumulative intensities
    lam_values : (n, m) cumulative intensities, linear between breakpoints
    atom_times : (k,) predictable atom times
    atom_laws : list of k :class:`DiscreteLaw` (mass at zero means no jump)
    """

    marks: np.ndarray
    lam_times: np.ndarray
    lam_values: np.ndarray
    atom_times: np.ndarray
    atom_laws: tuple

    @property
    def n_marks(self) -> int:
        return self.marks.shape[0]

    def lam(self, t) -> np.ndarray:
        """Cumulative intensities at ``t`` (scalar → (m,), array → (n, m))."""
        t = np.asarray(t, dtype=float)
        if self.n_marks == 0:
            return np.zeros(t.shape + (0,))
        return np.stack([np.interp(t, self.lam_times, self.lam_values[:, j]) for j in range(self.n_marks)], axis=-1)

    def integral(self, g: Callable[[np.ndarray], np.ndarray], t: float) -> float:
        """``∫_{[0,t]×R^d} g(x) ν(ds, dx)`` over nonzero marks."""
        total = 0.0
        if self.n_marks:
            total += float(np.asarray(g(self.marks)) @ self.lam(t))
        for s, law in zip(self.atom_times, self.atom_laws):
            if s <= t + KNOT_TOL:
                nz = np.any(law.values != 0, axis=1)
                if np.any(nz):
                    total += float(law.probs[nz] @ np.asarray(g(law.values[nz])))
        return total

    def total_mass(self, t: float) -> float:
        return self.integral(lambda x: np.ones(x.shape[0]), t)

    def has_atoms(self) -> bool:
        return self.atom_times.size > 0

    def is_continuous(self) -> bool:
        if self.n_marks == 0:
            return True
        dt = np.diff(self.lam_times)
        dv = np.diff(self.lam_values, axis=0)
        return not bool(np.any((dt <= 0)[:, None] & (dv != 0)))


@dataclass(frozen=True)
class LocalCharacteristics:
    """The pair ``([[M^c]], ν^M)`` of one path (or of a deterministic model)."""

    dim: int
    horizon: float
    cov_times: np.ndarray
    cov_values: np.ndarray  # (n, d, d), linear between breakpoints
    compensator: CompensatorRecord

    def covariation(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        flat = self.cov_values.reshape(self.cov_values.shape[0], -1)
        out = np.stack([np.interp(t, self.cov_times, flat[:, k]) for k in range(flat.shape[1])], axis=-1)
        return out.reshape(t.shape + (self.dim, self.dim))

    def breakpoints(self) -> np.ndarray:
        c = self.compensator
        return merge_times(self.cov_times, c.lam_times, c.atom_times, [0.0, self.horizon])

    def trace_covariation(self, t: float) -> float:
        return float(np.trace(self.covariation(t)))

    def second_moment(self, t: float) -> float:
        """``tr [[M^c]]_t + ∫_0^t ‖x‖² dν``, the Itô-isometry value of ``E‖M_t‖²``."""
        return self.trace_covariation(t) + self.compensator.integral(lambda x: np.sum(x**2, axis=1), t)

    def to_dict(self) -> dict:
        c = self.compensator
        return {
            "dim": self.dim,
            "horizon": self.horizon,
            "covariation": {"times": self.cov_times.tolist(), "values": self.cov_values.tolist()},
            "qlc": {"marks": c.marks.tolist(), "times": c.lam_times.tolist(), "intensities": c.lam_values.tolist()},
            "atoms": [{"time": float(s), "values": l.values.tolist(), "probs": l.probs.tolist()} for s, l in zip(c.atom_times, c.atom_laws)],
        }


@dataclass(frozen=True)
class ExponentialValue:
    A: complex
    G: complex
    tau_G: float  # first time with 1 + ΔA = 0, inf if none

    def __iter__(self):
        return iter((self.A, self.G))


# ---------------------------------------------------------------------------


def jump_measure(path: CadlagPath) -> JumpMeasure:
    return JumpMeasure(path.jump_times, path.jumps)


def _covariation_grid(phi_b: np.ndarray | None, plan: _GridPlan, d: int) -> np.ndarray:
    """Cumulative ``∫ΦΦ^T dA`` at grid points for one path, shape (G+1, d, d)."""
    G = plan.grid.size - 1
    out = np.zeros((G + 1, d, d))
    if phi_b is None:
        return out
    ci = plan.cell_interval
    live = ci >= 0
    inc = np.zeros((G, d, d))
    if np.any(live):
        P = phi_b[ci[live]]
        inc[live] = np.einsum("cdh,ceh->cde", P, P) * plan.d_clock[live][:, None, None]
    out[1:] = np.cumsum(inc, axis=0)
    return out


def _compress(times, values):
    """Drop breakpoints where the piecewise-linear function has no kink."""
    if times.size <= 2:
        return times, values
    flat = values.reshape(values.shape[0], -1)
    slope = np.diff(flat, axis=0) / np.diff(times)[:, None]
    kink = np.any(np.abs(np.diff(slope, axis=0)) > 1e-12 * (1.0 + np.abs(slope[1:])), axis=1)
    keep = np.concatenate([[True], kink, [True]])
    return times[keep], values[keep]


def characteristics_of(model: MartingaleModel, trace: SimulationTrace, index: int = 0) -> LocalCharacteristics:
    """Realized (frozen) characteristics of path ``index`` of the trace."""
    if trace.model is not model:
        if trace.model.dim != model.dim or abs(trace.horizon - model.horizon) > KNOT_TOL:
            raise ValueError("trace is inconsistent with the model")
    if not 0 <= index < trace.n_paths:
        raise IndexError("path index outside the trace")
    plan = _GridPlan.make(model, trace.grid)
    d = model.dim
    phi = None if trace.phi is None else np.asarray(trace.phi[index])
    if phi is not None and np.any(np.isnan(phi)):
        raise ValueError("trace lacks realized integrand values")
    cov = _covariation_grid(phi, plan, d)
    ct, cv = _compress(trace.grid, cov)
    m = model.n_marks
    marks = model.qlc.marks if m else np.zeros((0, d))
    lam = trace.lam[index] if m else np.zeros((trace.grid.size, 0))
    lt, lv = _compress(trace.grid, lam) if m else (np.array([0.0, model.horizon]), np.zeros((2, 0)))
    if model.n_acc:
        laws = tuple(trace.acc_law(index, i) for i in range(model.n_acc))
        at = model.accessible.times.copy()
    else:
        laws, at = (), np.zeros(0)
    comp = CompensatorRecord(marks, lt, lv, at, laws)
    return LocalCharacteristics(d, model.horizon, ct, cv, comp)


def model_characteristics(model: MartingaleModel, grid=None) -> LocalCharacteristics:
    """Characteristics of a model whose characteristics are deterministic."""
    if not model.deterministic:
        raise ValueError("model characteristics depend on the path")
    if grid is None:
        grid = build_grid(model, 0)
    plan = _GridPlan.make(model, grid)
    d = model.dim
    phi = model.continuous.integrand.matrices if model.continuous is not None else None
    cov = _covariation_grid(phi, plan, d)
    ct, cv = _compress(grid, cov)
    m = model.n_marks
    if m:
        lt, lv = _compress(grid, plan.base_lam)
        marks = model.qlc.marks
    else:
        lt, lv, marks = np.array([0.0, model.horizon]), np.zeros((2, 0)), np.zeros((0, d))
    if model.n_acc:
        laws, at = tuple(model.accessible.laws), model.accessible.times.copy()
    else:
        laws, at = (), np.zeros(0)
    return LocalCharacteristics(d, model.horizon, ct, cv, CompensatorRecord(marks, lt, lv, at, laws))


def canonical_decomposition(path: CadlagPath, trace: SimulationTrace, index: int = 0):
    """Split a traced path into ``(M^c, M^q, M^a)``.

    Every jump of ``path`` must be either a recorded q.l.c. atom or happen
    at an accessible time; anything else raises ``ValueError``.
    """
    bundle = trace.bundle
    atoms, _ = bundle.atoms_of(index)
    acc = trace.grid[trace.acc_index] if trace.acc_index.size else np.zeros(0)
    tagged = np.concatenate([atoms, acc])
    for t in path.jump_times:
        if tagged.size == 0 or np.min(np.abs(tagged - t)) > KNOT_TOL:
            raise ValueError(f"untagged jump at t = {t!r}")
    return bundle.parts(index)


def _tv_laws(a: DiscreteLaw, b: DiscreteLaw) -> float:
    return a.tv_distance(b)


def is_tangent(a: LocalCharacteristics, b: LocalCharacteristics, tol: float = DEFAULT_TANGENCY_TOL):
    """Compare two characteristic pairs; returns ``(equal, max deviation)``."""
    if a.dim != b.dim or abs(a.horizon - b.horizon) > KNOT_TOL:
        return False, float("inf")
    t = merge_times(a.breakpoints(), b.breakpoints())
    dev = float(np.max(np.abs(a.covariation(t) - b.covariation(t)))) if t.size else 0.0
    ca, cb = a.compensator, b.compensator
    # match mark alphabets, ignoring marks with identically zero intensity
    def active(c):
        if c.n_marks == 0:
            return np.zeros((0, a.dim)), np.zeros((t.size, 0))
        lam = c.lam(t)
        on = np.any(lam != 0, axis=0)
        return c.marks[on], lam[:, on]

    ma, la = active(ca)
    mb, lb = active(cb)
    if ma.shape[0] != mb.shape[0]:
        return False, float("inf")
    if ma.shape[0]:
        ka = np.lexsort(ma.T[::-1])
        kb = np.lexsort(mb.T[::-1])
        if not np.allclose(ma[ka], mb[kb], rtol=0, atol=tol):
            return False, float("inf")
        dev = max(dev, float(np.max(np.abs(la[:, ka] - lb[:, kb]))))
    if ca.atom_times.size != cb.atom_times.size or np.any(np.abs(ca.atom_times - cb.atom_times) > KNOT_TOL):
        return False, float("inf")
    for la_, lb_ in zip(ca.atom_laws, cb.atom_laws):
        dev = max(dev, _tv_laws(la_, lb_))
    return dev <= tol, dev


def exponential_characteristics(char: LocalCharacteristics, xstar, t: float) -> ExponentialValue:
    """``A_t(x*)`` and ``G_t(x*) = e^{A_t} Π_{s≤t} (1 + ΔA_s) e^{-ΔA_s}``."""
    x = np.asarray(xstar, dtype=float).reshape(char.dim)
    if t < -KNOT_TOL or t > char.horizon + KNOT_TOL:
        raise ValueError("time outside [0, T]")
    V = float(x @ char.covariation(t) @ x)
    c = char.compensator
    A = -0.5 * V + 0j
    if c.n_marks:
        u = c.marks @ x
        A += complex((np.exp(1j * u) - 1.0 - 1j * u) @ c.lam(t))
    logG = A
    tau = np.inf
    for s, law in zip(c.atom_times, c.atom_laws):
        u = law.values @ x
        linear = float(law.probs @ u)
        if abs(linear) > LINEAR_TERM_TOL:
            raise ValueError(f"predictable atom at {s:g} has nonzero mean along x* ({linear:.3g})")
        dA = complex(law.probs @ (np.exp(1j * u) - 1.0))
        one = 1.0 + dA
        if abs(one) <= UNDERFLOW and tau == np.inf:
            tau = float(s)
        if s <= t + KNOT_TOL:
            A += dA
            if abs(one) <= UNDERFLOW:
                logG = complex(-np.inf)
            elif np.isfinite(logG.real):
                logG += np.log(one)
    G = 0j if not np.isfinite(logG.real) else complex(np.exp(logG))
    return ExponentialValue(complex(A), G, tau)


def compensated_integral(F: Callable, atoms: JumpMeasure, comp: CompensatorRecord, horizon: float | None = None) -> CadlagPath:
    """``t -> Σ_{t_i ≤ t} F(x_i) - Σ_j F(x_j) Λ_j(t)`` for a q.l.c. compensator."""
    if comp.has_atoms():
        raise ValueError("predictable atoms present; use the accessible-part construction")
    if not comp.is_continuous():
        raise ValueError("compensator is not continuous in time")
    T = float(comp.lam_times[-1]) if horizon is None else float(horizon)
    fm = np.asarray(F(comp.marks), dtype=float) if comp.n_marks else np.zeros((0, 1))
    if atoms.times.size:
        fa = np.asarray(F(atoms.marks), dtype=float)
        fa = fa.reshape(atoms.times.size, -1)
    else:
        fa = np.zeros((0, fm.shape[1] if fm.ndim == 2 else 1))
    k = fa.shape[1] if fa.size else (fm.shape[1] if fm.ndim == 2 and fm.size else 1)
    fm = fm.reshape(comp.n_marks, k) if comp.n_marks else np.zeros((0, k))
    lt = comp.lam_times[comp.lam_times <= T]
    if lt[-1] < T:
        lt = np.append(lt, T)
    drift = CadlagPath.continuous(lt, -(comp.lam(lt) @ fm) if comp.n_marks else np.zeros((lt.size, k)))
    jumps = CadlagPath.step(T, atoms.times, fa, dim=k)
    return drift + jumps
