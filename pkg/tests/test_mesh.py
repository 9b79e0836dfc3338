import numpy as np
import pytest

from kskdvlab.mesh import (BandedOperator, IllConditionedSolve, ModelParams,
                           ViolatedGeometry, build_derivative_operator,
                           build_drift_operator, build_grid, region_mask,
                           solve_banded)


def params(k=0.5, eta=0.05, T=1.0, a=0.0, b=0.0):
    return ModelParams(k=k, eta=eta, T=T, a=a, b=b)


class TestGrid:
    def test_h_forced_by_count(self):
        g = build_grid(9)
        assert g.h == pytest.approx(0.1)
        np.testing.assert_allclose(g.x_points, 0.1 * np.arange(1, 10))

    def test_rejects_small_grid(self):
        with pytest.raises(ValueError):
            build_grid(7)

    def test_h_for_31_points(self):
        assert build_grid(31).h == pytest.approx(1.0 / 32)

    def test_points_increasing_in_unit_interval(self):
        g = build_grid(13)
        assert np.all(np.diff(g.x_points) > 0)
        assert g.x_points[0] > 0 and g.x_points[-1] < 1


class TestDerivativeOperators:
    def test_fourth_derivative_exact_on_quartic(self):
        # oracle: (x^2 (1-x)^2)'''' = 24 everywhere (symbolic differentiation)
        g = build_grid(12)
        d4 = build_derivative_operator(g, 4)
        p = g.x_points**2 * (1 - g.x_points) ** 2
        out = d4.apply(p)
        np.testing.assert_allclose(out[2:-2], 24.0, atol=1e-10)

    def test_zero_vector_maps_to_zero(self):
        g = build_grid(10)
        for order in (1, 2, 3, 4):
            op = build_derivative_operator(g, order)
            np.testing.assert_array_equal(op.apply(np.zeros(10)), 0.0)

    def test_second_derivative_exact_on_quadratic(self):
        g = build_grid(12)
        d2 = build_derivative_operator(g, 2)
        q = g.x_points * (1 - g.x_points)
        out = d2.apply(q)
        np.testing.assert_allclose(out[2:], -2.0, atol=1e-10)

    @pytest.mark.parametrize("order,degree", [(1, 2), (2, 3), (3, 4), (4, 5)])
    def test_interior_rows_exact_on_low_degree_polynomials(self, order, degree):
        g = build_grid(12)
        op = build_derivative_operator(g, order)
        rng = np.random.default_rng(order)
        coeffs = rng.uniform(-1, 1, degree + 1)
        poly = np.polynomial.Polynomial(coeffs)
        exact = poly.deriv(order)(g.x_points)
        out = op.apply(poly(g.x_points))
        np.testing.assert_allclose(out[2:-2], exact[2:-2], atol=1e-10)

    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    def test_refinement_reduces_interior_error(self, order):
        # clamped-compatible profile: value and slope vanish at both ends
        prof = lambda x: np.sin(np.pi * x) ** 2
        exact = {
            1: lambda x: np.pi * np.sin(2 * np.pi * x),
            2: lambda x: 2 * np.pi**2 * np.cos(2 * np.pi * x),
            3: lambda x: -4 * np.pi**3 * np.sin(2 * np.pi * x),
            4: lambda x: -8 * np.pi**4 * np.cos(2 * np.pi * x),
        }[order]

        def max_interior_error(n):
            g = build_grid(n)
            op = build_derivative_operator(g, order)
            err = op.apply(prof(g.x_points)) - exact(g.x_points)
            return np.max(np.abs(err[2:-2]))

        assert max_interior_error(15) / max_interior_error(31) >= 3.5

    def test_symmetry_structure(self):
        g = build_grid(11)
        d2 = build_derivative_operator(g, 2).todense()
        d3 = build_derivative_operator(g, 3).todense()
        d4 = build_derivative_operator(g, 4).todense()
        np.testing.assert_allclose(d2, d2.T)
        np.testing.assert_allclose(d4, d4.T)
        np.testing.assert_allclose(d3, -d3.T)

    def test_transpose_matches_dense(self):
        g = build_grid(9)
        op = build_derivative_operator(g, 3)
        np.testing.assert_allclose(op.transpose().todense(), op.todense().T)

    def test_bandwidths(self):
        g = build_grid(9)
        for order, bw in ((1, 1), (2, 1), (3, 2), (4, 2)):
            op = build_derivative_operator(g, order)
            assert max(op.lower, op.upper) == bw <= 2


class TestDriftOperator:
    def test_linearity_in_coefficients(self):
        g = build_grid(10)
        p = ModelParams(k=1e-300, eta=1.0, T=1.0)
        d3 = build_derivative_operator(g, 3).todense()
        d4 = build_derivative_operator(g, 4).todense()
        fwd = build_drift_operator(g, p, "forward").todense()
        np.testing.assert_allclose(fwd, d3 + d4, atol=1e-280)

    def test_forward_backward_differ_by_twice_d3(self):
        g = build_grid(10)
        p = params(k=0.7, eta=0.2)
        fwd = build_drift_operator(g, p, "forward").todense()
        bwd = build_drift_operator(g, p, "backward").todense()
        d3 = build_derivative_operator(g, 3).todense()
        np.testing.assert_allclose(fwd - bwd, 2 * d3, atol=1e-12)

    def test_backward_is_exact_transpose_of_forward(self):
        g = build_grid(10)
        p = params(k=0.7, eta=0.2)
        fwd = build_drift_operator(g, p, "forward").todense()
        bwd = build_drift_operator(g, p, "backward").todense()
        np.testing.assert_array_equal(bwd, fwd.T)

    def test_zero_in_zero_out(self):
        g = build_grid(10)
        op = build_drift_operator(g, params(), "forward")
        np.testing.assert_array_equal(op.apply(np.zeros(10)), 0.0)


class TestSolveBanded:
    def test_zero_shift_is_identity(self):
        g = build_grid(10)
        op = build_drift_operator(g, params(), "forward")
        rhs = np.arange(10.0)
        np.testing.assert_array_equal(solve_banded(op, 0.0, rhs), rhs)

    def test_residual_contract(self):
        g = build_grid(16)
        op = build_drift_operator(g, params(), "forward")
        rng = np.random.default_rng(3)
        rhs = rng.standard_normal(16)
        x = solve_banded(op, 0.05, rhs)
        resid = rhs - (x + 0.05 * op.apply(x))
        assert np.linalg.norm(resid) <= 1e-12 * np.linalg.norm(rhs)

    def test_zero_rhs(self):
        g = build_grid(10)
        op = build_drift_operator(g, params(), "forward")
        np.testing.assert_array_equal(solve_banded(op, 0.1, np.zeros(10)), 0.0)

    def test_roundtrip_identity(self):
        g = build_grid(12)
        op = build_drift_operator(g, params(), "forward")
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal(12)
        rhs = x0 + 0.02 * op.apply(x0)
        np.testing.assert_allclose(solve_banded(op, 0.02, rhs), x0,
                                   rtol=1e-12, atol=1e-12)

    def test_batched_rhs(self):
        g = build_grid(9)
        op = build_drift_operator(g, params(), "forward")
        rng = np.random.default_rng(5)
        rhs = rng.standard_normal((4, 9))
        x = solve_banded(op, 0.1, rhs)
        for k in range(4):
            np.testing.assert_allclose(x[k], solve_banded(op, 0.1, rhs[k]))

    def test_singular_system_reported(self):
        bands = np.zeros((1, 8))
        op = BandedOperator(n=8, lower=0, upper=0, bands=bands.copy())
        op.bands[0, :] = -1.0  # I + 1.0*(-I) = 0
        with pytest.raises(IllConditionedSolve):
            solve_banded(op, 1.0, np.ones(8))


class TestRegionMask:
    INTERVALS = {"O": (0.2, 0.5), "D": (0.6, 0.8), "Od0": (0.3, 0.7),
                 "Od1": (0.55, 0.75), "Od2": (0.6, 0.9)}

    def test_accepts_reference_layout(self):
        g = build_grid(24)
        m = region_mask(g, self.INTERVALS)
        assert np.any(m.chi_O * m.chi_Od0 > 0)
        assert "B" in m.intervals

    def test_empty_intersection_rejected(self):
        g = build_grid(24)
        bad = dict(self.INTERVALS, O=(0.1, 0.2), Od0=(0.5, 0.6))
        with pytest.raises(ViolatedGeometry) as err:
            region_mask(g, bad)
        assert err.value.clause == "intersection-empty"

    def test_overlapping_control_regions_rejected(self):
        g = build_grid(24)
        bad = dict(self.INTERVALS, O=(0.2, 0.4), D=(0.2, 0.4))
        with pytest.raises(ViolatedGeometry) as err:
            region_mask(g, bad)
        assert err.value.clause == "O-D-overlap"

    def test_derivative_regions_covering_intersection_rejected(self):
        g = build_grid(24)
        bad = dict(self.INTERVALS, Od1=(0.25, 0.75), Od2=(0.1, 0.95))
        with pytest.raises(ViolatedGeometry):
            region_mask(g, bad)

    def test_masks_are_sharp_indicators(self):
        g = build_grid(24)
        m = region_mask(g, self.INTERVALS)
        for chi in (m.chi_O, m.chi_D, m.chi_Od0, m.chi_Od1, m.chi_Od2, m.chi_B):
            assert set(np.unique(chi)) <= {0.0, 1.0}
        assert not np.any(m.chi_O * m.chi_D)


class TestModelParams:
    def test_positivity_enforced(self):
        with pytest.raises(ValueError):
            ModelParams(k=-1.0, eta=1.0, T=1.0)
        with pytest.raises(ValueError):
            ModelParams(k=1.0, eta=1.0, T=0.0)

    def test_tabulated_coefficients_piecewise_constant(self):
        g = build_grid(8)
        table = np.array([[1.0, 2.0], [3.0, 4.0]])  # 2 time cells, 2 space cells
        p = ModelParams(k=1.0, eta=1.0, T=1.0, a=table)
        A, B = p.coefficient_tables(g, 4)
        assert A.shape == (4, 8)
        # first half of time/space picks the corresponding cells
        assert A[0, 0] == 1.0 and A[0, -1] == 2.0
        assert A[3, 0] == 3.0 and A[3, -1] == 4.0
        np.testing.assert_array_equal(B, 0.0)
