"""Acceptance gate: the eleven release criteria at their stated tolerances.

Each test records one pass/fail line (printed in the terminal summary, or
directly when run as a script) before asserting.  Seeds are pinned; every
statistical comparison is a 3σ test.
"""

import time

import numpy as np
import pytest

from tangentlab import library
from tangentlab.characteristics import model_characteristics
from tangentlab.models import MartingaleModel
from tangentlab.paths import CadlagPath, skorokhod_j1, sup_distance
from tangentlab.verify import (
    char_function_check,
    cox_marginal_check,
    decomposition_check,
    frozen_tangency_check,
    independence_check,
    jkw_convergence_check,
    novikov_check,
    order_check,
    order_decision,
    tangency_ratio_check,
    terminal_moment_check,
)

RESULTS = {}
SEED = 20240617


def record(k, title, passed, detail, start):
    RESULTS[k] = f"criterion {k:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail} [{time.time() - start:.0f}s]"
    return passed


def feedback_mixed():
    """Every part state-dependent, with a clock, in R^1."""
    return MartingaleModel(
        1,
        1.0,
        continuous=library.feedback_diffusion().continuous,
        qlc=library.state_dependent_poisson(2.0).qlc,
        accessible=library.history_kernel_model().accessible,
        name="feedback-mixed",
    )


def brownian_poisson_atom():
    return MartingaleModel(1, 1.0, continuous=library.brownian().continuous, qlc=library.compensated_poisson(2.0).qlc, accessible=library.predictable_atom_model().accessible, name="brownian+poisson+atom")


MIXED = [library.mixed_2d, library.predictable_atom_model, library.jump_dependent_mixed, feedback_mixed, brownian_poisson_atom]
SUITE = [library.brownian, library.compensated_poisson, library.mixed_2d, library.predictable_atom_model, library.state_dependent_poisson, library.feedback_diffusion, library.history_kernel_model, library.jump_dependent_mixed, feedback_mixed]


def test_c01_canonical_decomposition():
    t0 = time.time()
    verdicts = [decomposition_check(m(), 100, SEED, resolution=64, tol=1e-10) for m in MIXED]
    worst = max(v.statistic for v in verdicts)
    overlaps = sum(v.details["support_overlaps"] for v in verdicts)
    ok = all(v.passed for v in verdicts)
    record(1, "canonical decomposition exactness", ok, f"5 models × 100 paths, max knot error {worst:.2e} ≤ 1e-10, support overlaps {overlaps}", t0)
    assert ok, [v.line() for v in verdicts]


def test_c02_tangency_by_construction():
    t0 = time.time()
    verdicts = [frozen_tangency_check(m(), 1000, SEED, resolution=64, tol=1e-9) for m in MIXED]
    worst = max(v.statistic for v in verdicts)
    ok = all(v.passed for v in verdicts)
    record(2, "tangency by construction", ok, f"5 models × 1000 draws, max deviation {worst:.2e} ≤ 1e-9", t0)
    assert ok, [v.line() for v in verdicts]


def test_c03_terminal_second_moment():
    t0 = time.time()
    models = [library.mixed_2d(), library.jump_dependent_mixed(), feedback_mixed()]
    verdicts = [terminal_moment_check(m, 100_000, SEED, resolution=64) for m in models]
    ok = all(v.passed for v in verdicts)
    parts = ", ".join(f"{m.name} |Δ|={v.statistic:.3f}≤{v.threshold:.3f}" for m, v in zip(models, verdicts))
    record(3, "Hilbert p=2 terminal-moment equality", ok, f"N=1e5: {parts}", t0)
    assert ok, [v.line() for v in verdicts]


def test_c04_sup_moment_band():
    t0 = time.time()
    verdicts = [tangency_ratio_check(m(), 10_000, 2.0, SEED, resolution=1024) for m in SUITE]
    ok = all(v.passed for v in verdicts)
    cis = [v.details["ci"] for v in verdicts]
    lo, hi = min(c[0] for c in cis), max(c[1] for c in cis)
    record(4, "sup-moment equivalence band", ok, f"{len(SUITE)} models, N=1e4, ratio CIs within [{lo:.3f}, {hi:.3f}] ⊂ [1/4, 4]", t0)
    assert ok, [v.line() for v in verdicts]


def test_c05_cox_marginals():
    t0 = time.time()
    models = [library.mixed_2d(), library.jump_dependent_mixed(), library.state_dependent_poisson(3.0)]
    verdicts = [cox_marginal_check(m, 10_000, SEED, resolution=64) for m in models]
    ok = all(v.passed for v in verdicts)
    corr = max(v.details["cross_correlation"] for v in verdicts)
    worst = max(v.statistic for v in verdicts)
    record(5, "Cox marginals", ok, f"N=1e4, worst mean/var deviation {worst:.2f}·3σ, max cross-mark |corr| {corr:.4f} ≤ {3 / np.sqrt(1e4):.3f}", t0)
    assert ok, [v.line() for v in verdicts]


def test_c06_exponential_formula():
    t0 = time.time()
    thetas = [0.25, 0.75, 1.5, 2.25, np.pi]
    times = [0.2, 0.4, 0.5, 0.75, 1.0]
    models = [library.brownian(), library.compensated_poisson(), library.predictable_atom_model()]
    verdicts = [char_function_check(m, thetas, times, 100_000, SEED) for m in models]
    ok = all(v.passed for v in verdicts)
    worst = max(v.statistic for v in verdicts)
    record(6, "exponential formula", ok, f"5×5 (θ,t) grid × 3 models, N=1e5, max |ĉ−G|/(3·se) = {worst:.3f}", t0)
    assert ok, [v.line() for v in verdicts]


def test_c07_grigelionis():
    t0 = time.time()
    det = [library.brownian(), library.compensated_poisson(), library.mixed_2d(), library.predictable_atom_model()]
    verdicts = [independence_check(m, n_paths=10_000, seed=SEED) for m in det]
    neg = independence_check(library.state_dependent_poisson(2.0), n_paths=10_000, seed=SEED, expect="dependent")
    ok = all(v.passed for v in verdicts) and neg.passed
    worst = max(v.statistic for v in verdicts)
    record(7, "Grigelionis independence check", ok, f"deterministic max stat {worst:.4f} ≤ {verdicts[0].threshold:.3f}; negative control {neg.statistic:.4f} > threshold", t0)
    assert ok, [v.line() for v in verdicts + [neg]]


def test_c08_jkw_convergence():
    t0 = time.time()
    models = [library.compensated_poisson(), library.jump_dependent_mixed()]
    verdicts = [jkw_convergence_check(m, [4, 16, 64, 256], None, 10_000, SEED, resolution=256, slack=0.05) for m in models]
    ok = all(v.passed for v in verdicts)
    finals = [r for v in verdicts for r in v.details["table"] if r["n"] == 256]
    worst = max(r["gap"] for r in finals)
    record(8, "JKW convergence", ok, f"2 models × 3 functionals, N=1e4, max gap at n=256 {worst:.4f}, trend non-increasing within 3σ", t0)
    assert ok, [v.line() for v in verdicts]


def test_c09_novikov():
    t0 = time.time()
    models = [library.compensated_poisson(1.0), library.scaled_marks(library.mixed_2d(), 1.0), library.state_dependent_poisson(2.0)]
    ident = lambda x: x
    p2 = [novikov_check(ident, m, 2.0, 10_000, SEED, resolution=256, constant=4.0) for m in models]
    fitted = {p: [novikov_check(ident, m, p, 10_000, SEED, resolution=256, constant=None).details["fitted_constant"] for m in models] for p in (1.0, 4.0)}
    ok = all(v.passed for v in p2) and all(np.isfinite(c) for cs in fitted.values() for c in cs)
    c2 = ", ".join(f"{v.statistic:.2f}" for v in p2)
    rep = "; ".join(f"p={p:g} fitted C {', '.join(f'{c:.2f}' for c in cs)}" for p, cs in fitted.items())
    record(9, "Novikov bound", ok, f"p=2 LHS/RHS {c2} ≤ 4; {rep} (reported)", t0)
    assert ok, [v.line() for v in p2]


def test_c10_order_checks():
    t0 = time.time()
    n1, n2 = library.compensated_poisson(1.0), library.compensated_poisson(2.0)
    rate = order_check(model_characteristics(n1), model_characteristics(n2), "subordination", (n1, n2), 10_000, 2.0, SEED, resolution=256)
    m = library.compensated_poisson(1.0)
    half = library.scaled_marks(m, 0.5)
    scaled = order_decision(model_characteristics(half), model_characteristics(m), "subordination")
    ok = rate.passed and rate.details["order"]["holds"] and not scaled["holds"]
    record(10, "order checks", ok, f"rate order holds, MC ratio {rate.statistic:.3f} ≤ {rate.threshold:.3f}; ½-scaled pair rejected ({len(scaled['reasons'])} reason(s))", t0)
    assert ok, (rate.line(), scaled)


def _random_step(rng, d=2):
    k = int(rng.integers(0, 5))
    t = np.sort(rng.uniform(0.01, 0.99, k))
    return CadlagPath.step(1.0, t, rng.normal(size=(k, d)), dim=d)


def _random_mixed(rng, d=2):
    n = int(rng.integers(2, 7))
    t = np.r_[0.0, np.sort(rng.uniform(0.01, 0.99, n - 2)), 1.0]
    return CadlagPath.continuous(t, np.vstack([np.zeros(d), rng.normal(size=(n - 1, d))])) + _random_step(rng, d)


def test_c11_metric_properties():
    t0 = time.time()
    rng = np.random.default_rng(SEED)
    tol = 1e-9
    worst = {"negative": 0.0, "asymmetry": 0.0, "self": 0.0, "triangle": 0.0, "above_sup": 0.0}
    for _ in range(1000):
        a, b, c = (_random_step(rng) for _ in range(3))
        ab, ba = skorokhod_j1(a, b), skorokhod_j1(b, a)
        worst["negative"] = max(worst["negative"], -ab)
        worst["asymmetry"] = max(worst["asymmetry"], abs(ab - ba))
        worst["self"] = max(worst["self"], skorokhod_j1(a, a))
        worst["triangle"] = max(worst["triangle"], ab - skorokhod_j1(a, c) - skorokhod_j1(c, b))
        worst["above_sup"] = max(worst["above_sup"], ab - sup_distance(a, b))
        x, y = _random_mixed(rng), _random_mixed(rng)
        xy = skorokhod_j1(x, y)
        worst["negative"] = max(worst["negative"], -xy)
        worst["asymmetry"] = max(worst["asymmetry"], abs(xy - skorokhod_j1(y, x)))
        worst["self"] = max(worst["self"], skorokhod_j1(x, x))
        worst["above_sup"] = max(worst["above_sup"], xy - sup_distance(x, y))
    ok = all(v <= tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(11, "J1 metric properties", ok, f"1e3 step triples + 1e3 mixed pairs, worst violations: {detail} (tol 1e-9)", t0)
    assert ok, worst


if __name__ == "__main__":  # pragma: no cover
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
