"""
Tests for the w-derivative elliptic solves.
"""

from dataclasses import replace

import numpy as np
import pytest
from elliptic import (
    KrylovSettings,
    LinearizedOperator,
    build_bundle,
    dw2_rhs,
    krylov_solve,
    phase_locked,
    solve_dw_phi,
)
from errors import NearSingularOperatorError
from spectral import inner, l2_norm, radial_gaussian
from vortex import residual, solve_vortex


class TestLinearizedOperator:
    """Test the operator L = -Delta + V + beta + 2 beta' |phi|^2 - w."""

    def test_coefficient_for_cubic(self, eg1_problem, eg1_vortex):
        """Test that the cubic coefficient is V + 3 lam |phi|^2 - w."""
        phi, _ = eg1_vortex
        op = LinearizedOperator(eg1_problem, phi)
        expected = eg1_problem.potential_values - 1.5 * phi.density() - 1.1
        np.testing.assert_allclose(op.coefficient, expected, atol=1e-13)

    def test_real_coefficients(self, eg1_problem, eg1_vortex):
        """Test that L maps real fields to real fields."""
        op = LinearizedOperator(eg1_problem, eg1_vortex[0])
        image = op.apply(radial_gaussian(eg1_problem.grid))
        assert np.max(np.abs(image.values.imag)) <= 1e-12

    def test_symmetric(self, eg1_problem, eg1_vortex):
        """Test <L psi1, psi2> = <psi1, L psi2> for decaying fields."""
        grid = eg1_problem.grid
        op = LinearizedOperator(eg1_problem, eg1_vortex[0])
        rng = np.random.default_rng(3)
        psi1 = radial_gaussian(grid, 1.0, 0.3) * (grid.X + 0.5j * grid.Y)
        psi2 = radial_gaussian(grid, 1.0, 0.2) * (
            rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
        )
        lhs = inner(op.apply(psi1), psi2)
        rhs = inner(psi1, op.apply(psi2))
        assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs))

    def test_linear(self, eg1_problem, eg1_vortex):
        """Test L(a psi1 + b psi2) = a L psi1 + b L psi2 for complex a, b."""
        grid = eg1_problem.grid
        op = LinearizedOperator(eg1_problem, eg1_vortex[0])
        psi1 = radial_gaussian(grid, 1.0, 0.3) * grid.X
        psi2 = radial_gaussian(grid, 2.0, 0.5) * (1.0 + 1j * grid.Y)
        a, b = 0.7 - 1.2j, -2.0 + 0.3j
        combined = op.apply(a * psi1 + b * psi2)
        separate = a * op.apply(psi1) + b * op.apply(psi2)
        assert (combined - separate).sup() <= 1e-12 * separate.sup()

    def test_vortex_image(self, eg1_problem, eg1_vortex):
        """Test L phi = 2 lam |phi|^2 phi up to the stationary residual."""
        phi, _ = eg1_vortex
        op = LinearizedOperator(eg1_problem, phi)
        expected = 2.0 * eg1_problem.nonlinearity.lam * phi.density() * phi
        defect = op.apply(phi) - expected
        assert (defect - residual(phi, eg1_problem)).sup() <= 1e-10 * phi.sup()
        assert defect.sup() <= eg1_problem.epsilon

    def test_krylov_recovers_known_solution(self, eg1_problem, eg1_vortex):
        """Test that GMRES inverts L on a manufactured right-hand side."""
        op = LinearizedOperator(eg1_problem, eg1_vortex[0])
        known = radial_gaussian(eg1_problem.grid) * (eg1_problem.grid.X + 0.5j)
        result = krylov_solve(op, op.apply(known))
        assert result.residual <= 1e-9
        assert (result.solution - known).sup() <= 1e-6 * known.sup()
        assert result.iterations > 0

    def test_iteration_cap_raises(self, eg1_problem, eg1_vortex):
        """Test that a starved GMRES raises NearSingularOperatorError."""
        op = LinearizedOperator(eg1_problem, eg1_vortex[0])
        starved = KrylovSettings(tol=1e-14, restart=1, max_iters=1)
        with pytest.raises(NearSingularOperatorError):
            solve_dw_phi(op, starved)

    def test_cycles(self):
        """Test that the iteration cap is split into restart cycles."""
        assert KrylovSettings(restart=50, max_iters=2000).cycles == 40
        assert KrylovSettings(restart=30, max_iters=100).cycles == 4


class TestDerivatives:
    """Test d phi/dw and d^2 phi/dw^2 on the reduced eg1 vortex."""

    def test_solve_residuals(self, eg1_bundle):
        """Test relative residuals of both solves."""
        first, second = eg1_bundle.solve_residuals
        assert first <= 1e-9
        assert second <= 1e-9
        assert eg1_bundle.report.phase_locked

    def test_dphi_solves_its_equation(self, eg1_problem, eg1_bundle):
        """Test L dphi = phi."""
        op = LinearizedOperator(eg1_problem, eg1_bundle.phi)
        defect = op.apply(eg1_bundle.dphi) - eg1_bundle.phi
        assert l2_norm(defect) <= 1e-9 * l2_norm(eg1_bundle.phi)

    def test_shared_phase_orthogonality(self, eg1_bundle):
        """Test <phi, i dphi> = 0."""
        phi, dphi = eg1_bundle.phi, eg1_bundle.dphi
        assert abs(inner(phi, 1j * dphi)) <= 1e-10 * l2_norm(phi) * l2_norm(dphi)

    def test_second_derivative_source_for_cubic(self, eg1_problem, eg1_bundle):
        """Test 2 psi - 6 lam |psi|^2 phi when beta'' = 0."""
        op = LinearizedOperator(eg1_problem, eg1_bundle.phi)
        psi = eg1_bundle.dphi
        expected = 2.0 * psi.values + 3.0 * psi.density() * eg1_bundle.phi.values
        np.testing.assert_allclose(dw2_rhs(op, psi).values, expected, atol=1e-12)

    def test_warm_started_bundle_agrees(self, eg1_problem, eg1_bundle):
        """Test that seeding from a previous bundle gives the same derivatives."""
        again = build_bundle(eg1_problem, eg1_bundle.phi, previous=eg1_bundle)
        assert (again.dphi - eg1_bundle.dphi).sup() <= 1e-7 * eg1_bundle.dphi.sup()
        assert again.report.dphi_iterations <= eg1_bundle.report.dphi_iterations


class TestPhaseLock:
    """Test the shared-phase check."""

    def test_real_multiple_is_locked(self, eg1_bundle):
        """Test that phi times a signed real profile is locked."""
        phi = eg1_bundle.phi
        assert phase_locked(phi, phi * (1.0 - phi.grid.r))

    def test_varying_phase_is_not_locked(self, eg1_bundle):
        """Test that phi e^{ix} is not locked."""
        phi = eg1_bundle.phi
        assert not phase_locked(phi, phi * np.exp(1j * phi.grid.X))


@pytest.mark.slow
class TestDerivativeOracle:
    """Test the elliptic derivatives against central differences of vortex solves."""

    def test_central_difference_agreement(self, eg1_problem):
        """Test d phi/dw to 1e-2 and d^2 phi/dw^2 to 5e-2 relative with h = 1e-3."""
        h = 1e-3
        tight = replace(eg1_problem, epsilon=1e-7, max_outer_iters=5000)
        phi, _ = solve_vortex(tight)
        plus, _ = solve_vortex(replace(tight, w=tight.w + h), warm_start=phi)
        minus, _ = solve_vortex(replace(tight, w=tight.w - h), warm_start=phi)
        bundle = build_bundle(tight, phi)

        first = (plus - minus) / (2 * h)
        second = (plus - 2.0 * phi + minus) / h**2
        assert (first - bundle.dphi).sup() <= 1e-2 * bundle.dphi.sup()
        assert (second - bundle.d2phi).sup() <= 5e-2 * bundle.d2phi.sup()
