"""
Tests for the vortex bound-state solver.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from errors import GridMismatchError, NonConvergenceError, VortexBranchError
from schemas import StopRule, VortexConfig
from spectral import (
    Nonlinearity,
    PolynomialNonlinearity,
    Potential,
    SpectralGrid,
    kinetic_energy,
    l2_norm,
)
from vortex import (
    VortexProblem,
    core_ratio,
    energy_scale_constant,
    hamiltonian_energy,
    initial_guess,
    linearized_ground_state,
    modulus_asymmetry,
    phase_winding,
    problem_from_config,
    residual,
    ring_radius,
    solve_vortex,
    solve_vortex_family,
    step3_identity_defect,
)


class TestVortexProblem:
    """Test problem construction."""

    def test_rejects_zero_spin_index(self, eg1_problem):
        """Test that m = 0 is rejected."""
        with pytest.raises(ValueError):
            replace(eg1_problem, m=0)

    def test_rotation_frequency(self, eg1_problem):
        """Test Omega = w / m."""
        assert replace(eg1_problem, m=2).omega == pytest.approx(0.55)

    def test_inner_tolerance_default(self, eg1_problem):
        """Test that the flow tolerance is min(1e-9, epsilon / 100)."""
        assert eg1_problem.flow_tol == 1e-9
        assert replace(eg1_problem, epsilon=1e-8).flow_tol == pytest.approx(1e-10)
        assert replace(eg1_problem, inner_tol=1e-6).flow_tol == 1e-6

    def test_from_config(self):
        """Test that a config maps onto a problem."""
        config = VortexConfig(domain=12, nx=64, ny=64, potential="zero", w=-0.5)
        problem = problem_from_config(config.model_copy(update={"lam": -2.0}))
        assert problem.grid == SpectralGrid.square(12.0, 64)
        assert problem.flow_steps is None
        assert problem_from_config(config.model_copy(update={"flow_steps": 1})).flow_steps == 1
        assert problem.nonlinearity == Nonlinearity(-2.0)
        assert not np.any(problem.potential_values)


class TestInitialGuess:
    """Test the starting iterate."""

    def test_m1_vanishes_at_origin(self, eg1_problem):
        """Test the (x + iy) exp(-|x|^2) guess with an exact zero at the origin."""
        guess = initial_guess(eg1_problem)
        grid = eg1_problem.grid
        assert guess.values[grid.origin_index] == 0.0
        assert phase_winding(guess, radius=2.0) == pytest.approx(2 * math.pi, abs=0.1)

    def test_higher_m_from_prior(self, eg1_problem):
        """Test phi^m / ||phi||_inf^m for m = 3."""
        prior = initial_guess(eg1_problem)
        guess = initial_guess(replace(eg1_problem, m=3), prior)
        assert guess.sup() == pytest.approx(1.0)
        assert phase_winding(guess, radius=1.5) == pytest.approx(6 * math.pi, abs=0.1)

    def test_prior_on_other_grid(self, eg1_problem):
        """Test that a prior on another grid is rejected."""
        prior = SpectralGrid.square(8.0, 32).zeros()
        with pytest.raises(GridMismatchError):
            initial_guess(replace(eg1_problem, m=2), prior)


class TestLinearizedGroundState:
    """Test Step 2."""

    def test_harmonic_ground_state_energy(self):
        """Test that the flow finds the sqrt(2) ground energy of -Delta + |x|^2/2."""
        problem = VortexProblem(
            grid=SpectralGrid.square(8.0, 64),
            potential=Potential.harmonic(0.5),
            nonlinearity=Nonlinearity(0.0),
            w=1e-12,
            m=4,
            epsilon=1.0,
            pseudo_dt=0.5,
            inner_tol=1e-11,
        )
        start = problem.grid.field(np.exp(-(problem.grid.r**2)))
        ground = linearized_ground_state(start, problem)
        assert l2_norm(ground) == pytest.approx(1.0)
        energy = hamiltonian_energy(ground, start, problem)
        assert energy == pytest.approx(math.sqrt(2.0), rel=1e-6)

    def test_vanishing_iterate(self, eg1_problem):
        """Test that a zero iterate is a branch error."""
        with pytest.raises(VortexBranchError):
            linearized_ground_state(eg1_problem.grid.zeros(), eg1_problem)

    def test_flow_cap(self, eg1_problem):
        """Test that the inner cap raises with the last iterate."""
        problem = replace(eg1_problem, max_inner_iters=1, inner_tol=1e-30)
        with pytest.raises(NonConvergenceError) as excinfo:
            linearized_ground_state(initial_guess(problem), problem)
        assert excinfo.value.last_iterate is not None


class TestEnergyScale:
    """Test Step 3."""

    def test_power_law_satisfies_identity(self, eg1_problem):
        """Test that c phi_tilde satisfies the energy identity."""
        guess = initial_guess(eg1_problem)
        phi_tilde = guess / l2_norm(guess)
        c = energy_scale_constant(phi_tilde, eg1_problem)
        assert c > 0
        assert step3_identity_defect(c * phi_tilde, eg1_problem) <= 1e-12

    def test_root_find_matches_closed_form(self, eg1_problem):
        """Test that the bracketing root-find reproduces the power-law formula."""
        guess = initial_guess(eg1_problem)
        phi_tilde = guess / l2_norm(guess)
        polynomial = replace(
            eg1_problem, nonlinearity=PolynomialNonlinearity(((-0.5, 1.0),))
        )
        assert energy_scale_constant(phi_tilde, polynomial) == pytest.approx(
            energy_scale_constant(phi_tilde, eg1_problem), rel=1e-10
        )

    def test_zero_numerator_gives_zero(self, eg1_problem):
        """Test c = 0 when w equals the quadratic energy of phi_tilde."""
        guess = initial_guess(eg1_problem)
        phi_tilde = guess / l2_norm(guess)
        quadratic = kinetic_energy(phi_tilde) + float(
            np.sum(eg1_problem.potential_values * phi_tilde.density())
        ) * phi_tilde.grid.cell_area
        problem = replace(eg1_problem, w=quadratic)
        assert energy_scale_constant(phi_tilde, problem) == 0.0

    def test_unit_ratio_gives_unit_constant(self, eg1_problem):
        """Test c = 1 when lam int |phi|^4 equals w - int |grad phi|^2 + V|phi|^2."""
        guess = initial_guess(eg1_problem)
        phi_tilde = guess / l2_norm(guess)
        cell = phi_tilde.grid.cell_area
        quadratic = kinetic_energy(phi_tilde) + float(
            np.sum(eg1_problem.potential_values * phi_tilde.density())
        ) * cell
        quartic = float(np.sum(phi_tilde.density() ** 2)) * cell
        lam = (eg1_problem.w - quadratic) / quartic
        problem = replace(eg1_problem, nonlinearity=Nonlinearity(lam))
        assert energy_scale_constant(phi_tilde, problem) == pytest.approx(1.0, rel=1e-12)

    def test_zero_interaction_is_branch_error(self, eg1_problem):
        """Test that lambda = 0 leaves Step 3 undefined."""
        guess = initial_guess(eg1_problem)
        problem = replace(eg1_problem, nonlinearity=Nonlinearity(0.0))
        with pytest.raises(VortexBranchError):
            energy_scale_constant(guess / l2_norm(guess), problem)

    def test_unbracketed_root(self, eg1_problem):
        """Test that a root beyond the bracket limit is a branch error."""
        guess = initial_guess(eg1_problem)
        defocusing = replace(
            eg1_problem, nonlinearity=PolynomialNonlinearity(((0.5, 1.0),))
        )
        with pytest.raises(VortexBranchError):
            energy_scale_constant(guess / l2_norm(guess), defocusing)


class TestSolveVortex:
    """Test the outer iteration on the reduced eg1 problem."""

    def test_converges_below_epsilon(self, eg1_problem, eg1_vortex):
        """Test the residue stopping rule."""
        phi, report = eg1_vortex
        assert report.converged
        assert report.residue_sup <= eg1_problem.epsilon
        assert report.n_tol == len(report.history)
        assert residual(phi, eg1_problem).sup() == pytest.approx(report.residue_sup)

    def test_vortex_shape(self, eg1_vortex):
        """Test winding one, a zero core and a ring."""
        phi, _ = eg1_vortex
        assert phase_winding(phi) == pytest.approx(2 * math.pi, abs=0.1)
        assert core_ratio(phi) <= 1e-6
        assert 0.5 <= ring_radius(phi) <= 4.0
        assert modulus_asymmetry(phi) <= 1e-6

    def test_energy_identity_holds(self, eg1_problem, eg1_vortex):
        """Test that the final iterate satisfies the Step-3 identity."""
        phi, _ = eg1_vortex
        assert step3_identity_defect(phi, eg1_problem) <= 1e-10

    def test_cauchy_rule(self, eg1_problem, eg1_vortex):
        """Test that the Cauchy rule stops on the iterate change."""
        phi, _ = eg1_vortex
        problem = replace(eg1_problem, stop_rule=StopRule.CAUCHY, epsilon=0.05)
        _, report = solve_vortex(problem, warm_start=phi)
        assert report.cauchy_sup <= 0.05
        assert report.n_tol <= 3

    def test_warm_start_on_other_grid(self, eg1_problem):
        """Test that a warm start must share the grid."""
        with pytest.raises(GridMismatchError):
            solve_vortex(eg1_problem, warm_start=SpectralGrid.square(8.0, 32).zeros())

    def test_iteration_cap_carries_report(self, eg1_problem):
        """Test that hitting max_outer_iters raises with the report attached."""
        problem = replace(eg1_problem, max_outer_iters=1, epsilon=1e-14)
        with pytest.raises(NonConvergenceError) as excinfo:
            solve_vortex(problem)
        assert excinfo.value.report.n_tol == 1
        assert not excinfo.value.report.converged

    def test_single_flow_step_per_iteration(self, eg1_problem, eg1_vortex):
        """Test that a one-step flow converges on the same rule in more outer iterations."""
        problem = replace(eg1_problem, flow_steps=1)
        phi, report = solve_vortex(problem)
        assert report.converged
        assert report.residue_sup <= problem.epsilon
        assert report.n_tol > eg1_vortex[1].n_tol
        assert phase_winding(phi) == pytest.approx(2 * math.pi, abs=0.1)

    def test_flow_budget_carries_report(self, eg1_problem):
        """Test that exhausting the total flow budget stops the solve."""
        problem = replace(eg1_problem, max_total_flow_steps=3, inner_tol=1e-30)
        with pytest.raises(NonConvergenceError) as excinfo:
            solve_vortex(problem)
        assert "gradient-flow steps" in str(excinfo.value)
        assert excinfo.value.report.n_tol == 0
        assert excinfo.value.last_iterate is not None

    def test_wrong_sign_branch_fails_fast(self):
        """Test that a repulsive interaction below the continuum is a branch error."""
        problem = VortexProblem(
            grid=SpectralGrid.square(12.0, 64),
            potential=Potential.zero(),
            nonlinearity=Nonlinearity(2.0),
            w=-0.5,
            m=1,
            epsilon=0.01,
            flow_steps=1,
            max_inconsistent_iters=3,
        )
        with pytest.raises(VortexBranchError) as excinfo:
            solve_vortex(problem)
        report = excinfo.value.report
        assert report.inconsistent_branch
        assert not report.converged
        assert report.n_tol == 3


@pytest.mark.slow
class TestVortexFamily:
    """Test spin indices 1, 2, 3 by continuation."""

    @pytest.mark.parametrize(
        "potential, lam, w, half_width",
        [(Potential.harmonic(0.5), -0.5, 1.1, 8.0), (Potential.zero(), -2.0, -0.5, 12.0)],
        ids=["eg1", "eg2"],
    )
    def test_winding_and_core_growth(self, potential, lam, w, half_width):
        """Test winding 2 pi m and a core that widens with m."""
        problem = VortexProblem(
            grid=SpectralGrid.square(half_width, 128),
            potential=potential,
            nonlinearity=Nonlinearity(lam),
            w=w,
            m=1,
            epsilon=0.01,
        )
        family = solve_vortex_family(problem)
        radii = []
        for m, (phi, report) in family.items():
            assert report.converged
            assert phase_winding(phi) == pytest.approx(2 * math.pi * m, abs=0.1)
            radii.append(ring_radius(phi))
        assert radii[0] < radii[1] < radii[2]
