import io
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tangentlab import library
from tangentlab.models import simulate_batch
from tangentlab.paths import (
    CadlagPath,
    TimeChange,
    apply_time_change,
    merge_times,
    realized_quadratic_variation,
    running_sup,
    skorokhod_j1,
    sup_distance,
)


def unit_jump(t, T=1.0):
    return CadlagPath.step(T, [t], [[1.0]])


def brute_force_j1(a: CadlagPath, b: CadlagPath, eps: float = 1e-9) -> float:
    """Enumerate where the reparametrization sends the jumps of ``a``.

    ``a∘λ^{-1}`` is ``a`` with its jumps moved to ``s = λ(t)``; the cost is
    ``max|s - t| + sup|a∘λ^{-1} - b|``.  Only the interleaving of ``s`` with
    the jumps of ``b`` matters, so candidates are the jump times of both
    paths and points just beside the jumps of ``b``.
    """
    T = a.horizon
    ta, ja = a.jump_times, a.jumps
    tb = b.jump_times
    cand = set(ta.tolist()) | {eps, T - eps}
    for u in tb:
        cand |= {u, u - eps, u + eps}
    cand = sorted(c for c in cand if 0 < c < T)
    if ta.size == 0:
        return sup_distance(a, b)
    best = np.inf
    for s in combinations(cand, ta.size):
        moved = CadlagPath.step(T, s, ja, dim=a.dim)
        best = min(best, float(np.max(np.abs(np.array(s) - ta))) + sup_distance(moved, b))
    return best


def random_step(rng, T=1.0, d=1, kmax=3):
    k = int(rng.integers(0, kmax + 1))
    t = np.sort(rng.choice(np.arange(1, 20) / 20 * T, size=k, replace=False)) if k else np.zeros(0)
    t = t + rng.uniform(-0.02, 0.02, size=k) * T
    jumps = rng.choice([-1.0, -0.5, 0.5, 1.0, 2.0], size=(k, d))
    return CadlagPath.step(T, np.sort(t), jumps, dim=d)


def random_mixed(rng, T=1.0, d=2, n=6):
    base = CadlagPath.continuous(np.linspace(0, T, n), np.vstack([np.zeros(d), rng.normal(size=(n - 1, d))]))
    return base + random_step(rng, T, d)


class TestCadlagPath:
    def test_zero_path(self):
        z = CadlagPath.zero(1.0, 3)
        np.testing.assert_array_equal(z.eval([0.0, 0.3, 1.0]), np.zeros((3, 3)), err_msg="zero path evaluates to zero")

    def test_right_continuity(self):
        p = CadlagPath.step(1.0, [0.3], [[1.0, 0.0]])
        np.testing.assert_array_equal(p.eval(0.3), [1.0, 0.0], err_msg="value at the jump is the post-jump value")
        np.testing.assert_array_equal(p.left_limit(0.3), [0.0, 0.0], err_msg="left limit is the pre-jump value")

    def test_linear_interpolation(self):
        p = CadlagPath.continuous([0.0, 1.0], [[0.0], [2.0]])
        assert p.eval(0.5)[0] == pytest.approx(1.0), "midpoint of a linear segment"

    def test_validation(self):
        with pytest.raises(ValueError):
            CadlagPath([0.1, 1.0], [[0], [0]], [[0], [0]])
        with pytest.raises(ValueError):
            CadlagPath([0.0, 0.5, 0.5], [[0]] * 3, [[0]] * 3)
        with pytest.raises(ValueError):
            CadlagPath([0.0, 1.0], [[0], [0]], [[1], [0]])
        with pytest.raises(ValueError):
            CadlagPath([0.0, 1.0], [[0], [np.nan]], [[0], [0]])

    def test_addition_merges_simultaneous_jumps(self):
        a = CadlagPath.step(1.0, [0.5], [[1.0]])
        b = CadlagPath.step(1.0, [0.5], [[2.0]])
        s = a + b
        assert s.jump_times.tolist() == [0.5], "one merged jump"
        assert s.jumps[0, 0] == pytest.approx(3.0), "jump sizes add"

    def test_csv_round_trip(self, rng):
        p = random_mixed(rng)
        buf = io.StringIO()
        p.to_csv(buf)
        buf.seek(0)
        q = CadlagPath.read_csv(buf)
        assert p == q, "CSV round trip is exact"

    def test_immutable(self):
        p = CadlagPath.step(1.0, [0.5], [[1.0]])
        with pytest.raises(ValueError):
            p.right[0, 0] = 3.0

    def test_merge_times_dedups(self):
        t = merge_times([0.0, 0.5, 1.0], [0.5 + 1e-14, 0.7])
        assert t.tolist() == [0.0, 0.5, 0.7, 1.0], f"merged knots {t}"


class TestRunningSup:
    def test_zero(self):
        r = running_sup(CadlagPath.zero(1.0, 2))
        assert r.terminal == 0.0, "sup of the zero path"

    def test_three_four_five(self):
        p = CadlagPath.step(1.0, [0.5], [[3.0, 4.0]])
        assert running_sup(p)(1.0) == pytest.approx(5.0), "Euclidean 3-4-5"
        assert running_sup(p)(0.49) == 0.0, "before the jump"

    def test_bridge(self):
        p = CadlagPath.continuous([0.0, 0.5, 1.0], [[0.0], [2.0], [0.0]])
        assert running_sup(p)(1.0) == pytest.approx(2.0), "segment extremum at the middle knot"


class TestQuadraticVariation:
    def test_linear_path_vanishes_with_mesh(self):
        p = CadlagPath.continuous([0.0, 1.0], [[0.0], [1.0]])
        for n in (10, 100, 1000):
            qv = realized_quadratic_variation(p, np.linspace(0, 1, n + 1)).terminal[0, 0]
            assert qv == pytest.approx(1.0 / n), f"QV of a linear path at mesh 1/{n}"

    def test_pure_jump_exact(self):
        x1, x2 = np.array([1.0, -2.0]), np.array([0.5, 3.0])
        p = CadlagPath.step(1.0, [0.3, 0.7], [x1, x2])
        expected = np.outer(x1, x1) + np.outer(x2, x2)
        for mesh in ([0.0, 0.3, 0.7, 1.0], np.unique(np.r_[np.linspace(0, 1, 37), 0.3, 0.7])):
            np.testing.assert_allclose(realized_quadratic_variation(p, mesh).terminal, expected, atol=1e-12, err_msg="sum of squared jumps")

    def test_mesh_must_contain_jumps(self):
        p = CadlagPath.step(1.0, [0.33], [[1.0]])
        with pytest.raises(ValueError):
            realized_quadratic_variation(p, np.linspace(0, 1, 11))

    def test_brownian_oracle(self):
        model = library.brownian()
        trace = simulate_batch(model, 5, np.arange(1000), 1024)
        mesh = trace.grid
        qv = np.array([realized_quadratic_variation(trace.path(i), mesh).terminal[0, 0] for i in range(1000)])
        frac = np.mean(np.abs(qv - 1.0) <= 5.0 * np.sqrt(1.0 / 1024))
        assert frac >= 0.99, f"only {frac:.3f} of paths have QV within 5·mesh^(1/2) of 1"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_increments_psd(self, seed):
        p = random_mixed(np.random.default_rng(seed))
        qv = realized_quadratic_variation(p)
        inc = np.diff(qv.values, axis=0)
        eig = np.linalg.eigvalsh(inc)
        assert eig.min() >= -1e-12, f"QV increment with eigenvalue {eig.min()}"


class TestTimeChange:
    def test_identity(self, rng):
        p = random_mixed(rng)
        q = apply_time_change(p, TimeChange.identity(1.0))
        assert sup_distance(p, q) < 1e-12, "identity time change keeps the path"

    def test_doubling_clock(self):
        p = CadlagPath.step(2.0, [0.8], [[1.0]])
        q = apply_time_change(p, TimeChange.linear(1.0, 2.0))
        assert q.horizon == 1.0, "domain of the time change"
        assert q.jump_times.tolist() == pytest.approx([0.4]), "jump moves from 0.8 to 0.4"

    def test_round_trip(self, rng):
        p = random_mixed(rng, T=2.0)
        tc = TimeChange(np.array([0.0, 0.4, 1.0]), np.array([0.0, 1.5, 2.0]))
        inv = TimeChange(tc.values, tc.times)
        back = apply_time_change(apply_time_change(p, tc), inv)
        np.testing.assert_allclose(back.eval(p.times), p.eval(p.times), atol=1e-12, err_msg="A∘τ round trip")

    def test_generalized_inverse_flat_piece(self):
        tc = TimeChange(np.array([0.0, 1.0, 2.0, 3.0]), np.array([0.0, 1.0, 1.0, 2.0]))
        assert tc.inverse(1.0) == pytest.approx(1.0), "left end of a flat piece"
        assert tc.inverse(1.5) == pytest.approx(2.5), "strictly increasing piece"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_preserves_running_sup(self, seed):
        rng = np.random.default_rng(seed)
        p = random_mixed(rng, T=3.0)
        k = int(rng.integers(1, 4))
        t = np.r_[0.0, np.sort(rng.uniform(0.1, 0.9, k)), 1.0]
        v = np.r_[0.0, np.sort(rng.uniform(0.0, 3.0, k)), rng.uniform(0.5, 3.0)]
        v = np.maximum.accumulate(v)
        tc = TimeChange(t, v)
        q = apply_time_change(p, tc)
        assert running_sup(q)(1.0) == pytest.approx(running_sup(p)(tc(1.0)), abs=1e-12), "sup of path∘A at T equals sup of path at A(T)"


class TestSkorokhod:
    def test_identical(self, rng):
        p = random_mixed(rng)
        assert skorokhod_j1(p, p) == 0.0, "d(a, a) = 0"

    def test_nearby_jumps(self):
        assert skorokhod_j1(unit_jump(0.5), unit_jump(0.6)) == pytest.approx(0.1), "match the jumps: cost 0.1"

    def test_missing_jump(self):
        assert skorokhod_j1(CadlagPath.zero(1.0), unit_jump(0.5)) == pytest.approx(1.0), "no λ removes a jump"

    def test_far_jumps_use_value_gap(self):
        assert skorokhod_j1(unit_jump(0.05), unit_jump(0.95)) == pytest.approx(0.9), "distortion 0.9 beats value gap 1"
        a = CadlagPath.step(1.0, [0.05], [[0.3]])
        b = CadlagPath.step(1.0, [0.95], [[0.3]])
        assert skorokhod_j1(a, b) == pytest.approx(0.3), "small jumps: value gap 0.3 beats distortion"

    @pytest.mark.parametrize("seed", range(40))
    def test_step_paths_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_step(rng, d=int(rng.integers(1, 3))), None
        b = random_step(rng, d=a.dim)
        exact = skorokhod_j1(a, b)
        brute = min(brute_force_j1(a, b), brute_force_j1(b, a))
        assert exact <= brute + 1e-9, f"J1 {exact} exceeds an admissible reparametrization {brute}"
        assert brute <= exact + 1e-6, f"brute force {brute} did not reach the exact value {exact}"

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_metric_axioms_on_step_paths(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_step(rng, d=2) for _ in range(3))
        ab, ba = skorokhod_j1(a, b), skorokhod_j1(b, a)
        assert ab >= 0, "nonnegative"
        assert abs(ab - ba) <= 1e-9, "symmetric"
        assert ab <= skorokhod_j1(a, c) + skorokhod_j1(c, b) + 1e-9, "triangle inequality"
        assert ab <= sup_distance(a, b) + 1e-9, "J1 is dominated by the uniform distance"

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_dominated_by_sup_on_mixed_paths(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mixed(rng), random_mixed(rng)
        d = skorokhod_j1(a, b)
        assert 0 <= d <= sup_distance(a, b) + 1e-9, "0 ≤ J1 ≤ sup"
        assert abs(d - skorokhod_j1(b, a)) <= 1e-9, "symmetric"

    def test_continuous_paths_small_shift(self):
        t = np.linspace(0, 1, 5)
        a = CadlagPath.continuous(t, np.sin(t)[:, None])
        assert skorokhod_j1(a, a * 1.0) == 0.0, "equal continuous paths"
