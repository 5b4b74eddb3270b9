import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abplift import _kernels_py, kernels
from abplift.lab import (
    AbpInstance,
    CapacityError,
    constraint_count,
    exhaustive_feasible,
    feasible_prefix,
    gaussian_rows,
    generate_instance,
    gray_state,
    half_crossing,
    local_search,
    naive_feasible,
    satisfiability_curve,
    sign_vector,
)
from abplift.quadrature import ParameterError


class TestInstances:
    def test_shape_and_determinism(self):
        a = generate_instance(4, 0.5, 0.0, seed=7)
        b = generate_instance(4, 0.5, 0.0, seed=7)
        assert a.m == 2 and a.G.shape == (2, 4)
        np.testing.assert_array_equal(a.G, b.G)

    def test_rounding(self):
        assert generate_instance(10, 0.8331, 0.0, 1).m == 8
        assert constraint_count(10, 0.85) == 9  # half rounds up
        assert constraint_count(4, 0.625) == 3

    def test_seeds_differ(self):
        assert not np.array_equal(generate_instance(6, 1.0, 0.0, 1).G, generate_instance(6, 1.0, 0.0, 2).G)

    def test_rows_do_not_depend_on_m(self):
        np.testing.assert_array_equal(gaussian_rows(3, 1, 10, 8)[:4], gaussian_rows(3, 1, 4, 8))

    def test_trials_differ(self):
        assert not np.array_equal(generate_instance(6, 1.0, 0.0, 1, 0).G, generate_instance(6, 1.0, 0.0, 1, 1).G)

    def test_entries_look_standard_normal(self):
        G = gaussian_rows(11, 0, 400, 250)
        assert abs(G.mean()) < 0.01 and abs(G.std() - 1.0) < 0.01

    @pytest.mark.parametrize("n, alpha", [(0, 1.0), (4, 0.1), (4, -1.0)])
    def test_invalid(self, n, alpha):
        with pytest.raises(ParameterError):
            generate_instance(n, alpha, 0.0, 1)

    def test_matrix_is_read_only(self):
        inst = generate_instance(4, 1.0, 0.0, 1)
        with pytest.raises(ValueError):
            inst.G[0, 0] = 1.0


class TestExhaustive:
    def test_all_positive_row(self):
        rep = exhaustive_feasible(AbpInstance(2, 1, 0.0, [[1.0, 1.0]], 0))
        assert rep.feasible and rep.witness == (1, 1)
        assert rep.margin == pytest.approx(math.sqrt(2.0))

    def test_forced_cancellation_counts_as_feasible(self):
        rep = exhaustive_feasible(AbpInstance(2, 2, 0.0, [[1.0, 1.0], [-1.0, -1.0]], 0))
        assert rep.feasible and rep.margin == 0.0
        assert sum(rep.witness) == 0

    def test_infeasible_reports_best_margin(self):
        inst = AbpInstance(1, 2, 0.0, [[1.0], [-1.0]], 0)
        rep = exhaustive_feasible(inst)
        assert not rep.feasible and rep.status == "infeasible"
        assert rep.margin == pytest.approx(-1.0)
        assert rep.candidates_checked == 2

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_naive(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 13))
        alpha = float(rng.uniform(0.3, 1.6))
        kappa = float(rng.choice([0.0, 0.0, 0.25, -0.25]))
        inst = generate_instance(n, max(alpha, 1.0 / n), kappa, seed)
        fast, slow = exhaustive_feasible(inst), naive_feasible(inst)
        assert fast.feasible == slow.feasible
        if fast.feasible:
            assert inst.satisfied_by(fast.witness)
        else:
            assert fast.margin == pytest.approx(slow.margin, abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_row_permutation_invariant(self, seed):
        inst = generate_instance(11, 0.9, 0.0, seed)
        perm = np.random.default_rng(seed).permutation(inst.m)
        assert exhaustive_feasible(inst).feasible == exhaustive_feasible(inst.with_rows(perm)).feasible

    def test_capacity(self):
        inst = AbpInstance(31, 1, 0.0, np.ones((1, 31)), 0)
        with pytest.raises(CapacityError):
            exhaustive_feasible(inst)

    @pytest.mark.parametrize("backend", [kernels.gray_scan, _kernels_py.gray_scan])
    @pytest.mark.parametrize("n", [1, 2, 7, 13, 20])
    def test_visits_every_vector(self, backend, n):
        cols = np.ascontiguousarray(np.random.default_rng(n).standard_normal((3, n)).T)
        _, _, _, _, checked, y = backend(cols, 1e9, False)
        assert checked == 2**n
        states = {gray_state(k) for k in range(2**n)}
        assert len(states) == 2**n
        # drift: incremental products equal the direct product at the last vector
        last = np.array(sign_vector(gray_state(2**n - 1), n), dtype=float)
        np.testing.assert_allclose(y, cols.T @ last, atol=1e-10)

    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_witnesses_are_sound(self, n, seed):
        inst = generate_instance(n, 1.0, 0.0, seed)
        rep = exhaustive_feasible(inst)
        if rep.feasible:
            assert np.all(inst.G @ np.array(rep.witness) >= 0.0)
            assert rep.margin >= 0.0


class TestCurve:
    def test_prefix_is_exact(self):
        n, m = 10, 14
        k = feasible_prefix(n, m, 0.0, 3, 0)
        G = gaussian_rows(3, 0, m, n)
        if k < m:
            assert not exhaustive_feasible(AbpInstance(n, k + 1, 0.0, G[: k + 1], 3)).feasible
        assert exhaustive_feasible(AbpInstance(n, max(k, 1), 0.0, G[: max(k, 1)], 3)).feasible or k == 0

    def test_curve_matches_independent_decisions(self):
        alphas = [0.4, 0.8, 1.2]
        curve = satisfiability_curve(10, alphas, 20, 0.0, seed=5)
        for pt in curve:
            count = sum(
                exhaustive_feasible(generate_instance(10, pt.alpha, 0.0, 5, trial=t)).feasible
                for t in range(20)
            )
            assert pt.feasible == count

    def test_monotone_and_limits(self):
        curve = satisfiability_curve(15, [0.1, 0.5, 1.0, 2.0], 200, 0.0, seed=1)
        probs = [c.probability for c in curve]
        assert probs == sorted(probs, reverse=True)
        assert probs[0] >= 0.95 and probs[-1] <= 0.2

    def test_stderr(self):
        (pt,) = satisfiability_curve(8, [1.0], 50, 0.0, seed=2)
        assert pt.stderr == pytest.approx(math.sqrt(pt.probability * (1 - pt.probability) / 50))

    def test_deterministic(self):
        a = satisfiability_curve(9, [0.5, 1.0], 30, 0.0, seed=4)
        assert a == satisfiability_curve(9, [0.5, 1.0], 30, 0.0, seed=4)

    def test_local_mode_never_exceeds_exhaustive(self):
        alphas = [0.4, 0.8, 1.2]
        ex = satisfiability_curve(10, alphas, 30, 0.0, seed=6)
        lo = satisfiability_curve(10, alphas, 30, 0.0, seed=6, search="local", restarts=10)
        for a, b in zip(ex, lo):
            assert b.feasible <= a.feasible

    def test_half_crossing(self):
        from abplift.lab import CurvePoint

        pts = [CurvePoint(0.5, 5, 1.0, 0, 10, 10), CurvePoint(1.0, 10, 0.0, 0, 0, 10)]
        assert half_crossing(pts) == pytest.approx(0.75)
        assert half_crossing(pts[:1]) is None

    def test_invalid(self):
        with pytest.raises(ParameterError):
            satisfiability_curve(10, [0.5], 0)
        with pytest.raises(CapacityError):
            satisfiability_curve(31, [0.5], 1)


class TestLocalSearch:
    def test_witness_has_zero_energy(self):
        inst = generate_instance(15, 0.3, 0.0, 9)
        rep = local_search(inst, restarts=20, seed=1)
        assert rep.feasible and rep.proven
        assert np.all(inst.G @ np.array(rep.witness) >= 0.0)

    @pytest.mark.parametrize("seed", range(15))
    def test_sound_on_infeasible(self, seed):
        inst = generate_instance(10, 2.0, 0.0, seed)
        if not exhaustive_feasible(inst).feasible:
            rep = local_search(inst, restarts=5, seed=seed)
            assert not rep.feasible and rep.status == "not_found"

    def test_deterministic(self):
        inst = generate_instance(14, 0.6, 0.0, 3)
        assert local_search(inst, 5, seed=2) == local_search(inst, 5, seed=2)
