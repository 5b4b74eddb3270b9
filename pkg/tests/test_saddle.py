import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abplift.functional import LiftingPoint, QuadOrders, psi_bar
from abplift.quadrature import ParameterError
from abplift.saddle import (
    NonConvergenceError,
    SolverSettings,
    coordinate_names,
    decode,
    default_seed,
    degeneracy,
    embed_equal_neighbours,
    encode,
    fd_gradient,
    lift_inner,
    lift_outer,
    lift_resample,
    saddle_profile,
    solve_stationary,
)

LEVEL2_ALPHA = 0.8331


@st.composite
def points(draw):
    r = draw(st.integers(2, 5))
    p = sorted(draw(st.lists(st.floats(0.01, 0.99), min_size=r - 1, max_size=r - 1, unique=True)), reverse=True)
    q = sorted(draw(st.lists(st.floats(0.01, 5.0), min_size=r - 1, max_size=r - 1, unique=True)), reverse=True)
    c = draw(st.lists(st.floats(0.1, 20.0), min_size=r - 2, max_size=r - 2))
    return LiftingPoint(r, tuple(p), tuple(q), tuple(c))


class TestCoordinates:
    @given(points(), st.booleans())
    def test_round_trip(self, pt, free):
        back = decode(encode(pt, free), pt.r, None if free else pt.exp_c_s)
        np.testing.assert_allclose(back.p, pt.p, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(back.q_s, pt.q_s, rtol=1e-9)
        np.testing.assert_allclose(back.exp_c_s, pt.exp_c_s, rtol=1e-12)

    @given(st.integers(2, 5), st.lists(st.floats(-8.0, 8.0), min_size=12, max_size=12))
    def test_every_vector_decodes_to_a_valid_point(self, r, raw):
        theta = np.array(raw[: 3 * r - 4])
        decode(theta, r, None)  # raises if invalid

    def test_names(self):
        assert coordinate_names(3) == ["t2", "t3", "u2", "u3", "v3"]
        assert coordinate_names(3, free_exponents=False) == ["t2", "t3", "u2", "u3"]


class TestLevelTwo:
    @pytest.fixture(scope="class")
    def result(self):
        return solve_stationary(2, 0.0, LEVEL2_ALPHA, SolverSettings(seed_point=default_seed(2)))

    def test_point(self, result):
        assert result.point.p[0] == pytest.approx(0.5639, abs=2e-3)
        assert result.point.q_s[0] == pytest.approx(2.5764, abs=1e-2)
        assert abs(result.psi_value) < 1e-4
        assert result.converged and result.degenerate is None

    def test_gradient_is_small(self, result):
        g = fd_gradient(result.point, 0.0, LEVEL2_ALPHA, SolverSettings())
        assert np.max(np.abs(g)) <= 1e-6

    def test_orders_recorded(self, result):
        assert result.orders.levels == 1

    def test_warm_start_with_hessian_is_cheaper(self, result):
        s = SolverSettings(seed_point=result.point)
        cold = solve_stationary(2, 0.0, 0.84, s, profile=False)
        warm = solve_stationary(2, 0.0, 0.84, s, hessian=result.hessian, profile=False)
        assert warm.evaluations < cold.evaluations
        assert warm.psi_value == pytest.approx(cold.psi_value, abs=1e-9)

    def test_deterministic(self, result):
        again = solve_stationary(2, 0.0, LEVEL2_ALPHA, SolverSettings(seed_point=default_seed(2)))
        assert again.point == result.point and again.psi_value == result.psi_value


class TestLevelOne:
    def test_closed_form(self):
        res = solve_stationary(1, 0.0, 4.0 / math.pi)
        assert abs(res.psi_value) < 1e-12
        assert res.saddle_profile is None


class TestProfile:
    def test_maximization_uses_reduced_curvature(self):
        # strong coupling between p/q and the exponent: raw curvature positive,
        # reduced curvature negative
        H = np.diag([1.0, -1.0, 1.0, -1.0, 0.1])
        H[0, 4] = H[4, 0] = 1.0
        prof = saddle_profile(H, 3, True, 1e-6)
        assert prof.second_differences["v3"] > 0
        assert prof.exponent_curvature[0] < 0
        assert prof.maximization_type

    def test_no_exponents(self):
        prof = saddle_profile(np.eye(2), 2, True, 1e-6)
        assert prof.exponent_curvature == ()
        assert prof.maximization_type


class TestSeeds:
    P3 = LiftingPoint(3, (0.98, 0.65), (1.0, 0.25), (4.3,))

    def test_lifts_have_valid_levels(self):
        assert lift_outer(self.P3).r == 4
        assert lift_inner(self.P3, 3.0).r == 4
        assert lift_resample(self.P3, 1.3).r == 4

    def test_resample_keeps_endpoints(self):
        pt = lift_resample(self.P3, 1.5)
        assert pt.p[-1] == pytest.approx(0.65)
        assert pt.q_s[0] == pytest.approx(1.0) and pt.q_s[-1] == pytest.approx(0.25)
        assert pt.exp_c_s[1] / pt.exp_c_s[0] == pytest.approx(2.25)

    def test_resample_needs_exponents(self):
        with pytest.raises(ParameterError):
            lift_resample(LiftingPoint(2, (0.5,), (2.0,)))

    @pytest.mark.parametrize("c", [0.5, 1.0, 3.0])
    def test_equal_neighbour_embedding_preserves_value(self, c):
        orders3 = QuadOrders((40, 80), (40, 80))
        low = LiftingPoint(2, (0.56,), (2.57,))
        high = embed_equal_neighbours(low, 3, c)
        assert psi_bar(high, 0.0, 0.8, orders3) == pytest.approx(psi_bar(low, 0.0, 0.8, QuadOrders((80,), (80,))), abs=1e-9)

    def test_degeneracy_flags(self):
        assert degeneracy(self.P3) is None
        assert "coincide" in degeneracy(LiftingPoint(3, (0.9, 0.5), (1.0, 1.0 - 1e-5), (2.0,)))
        assert "merges" in degeneracy(LiftingPoint(3, (0.9, 0.5), (1.0, 0.5), (1.0,)))
        assert "coincide" in degeneracy(LiftingPoint(4, (0.99, 0.9, 0.5), (2.0, 1.0, 0.5), (4.0, 4.0)))
        assert "vanishes" in degeneracy(LiftingPoint(3, (0.9, 1e-5), (1.0, 0.5), (2.0,)))


class TestFailure:
    def test_non_convergence_carries_best(self):
        s = SolverSettings(seed_point=LiftingPoint(3, (0.9, 0.2), (3.0, 0.1), (9.0,)), max_iters=1)
        with pytest.raises(NonConvergenceError) as info:
            solve_stationary(3, 0.0, 0.8, s, fallback=False)
        assert info.value.best is not None

    def test_wrong_seed_level(self):
        with pytest.raises(ParameterError):
            solve_stationary(3, 0.0, 0.8, SolverSettings(seed_point=default_seed(2)))

    @pytest.mark.parametrize("kwargs", [dict(fd_step=0.0), dict(grad_tol=-1.0), dict(max_iters=0)])
    def test_settings_validated(self, kwargs):
        with pytest.raises(ParameterError):
            SolverSettings(**kwargs)
