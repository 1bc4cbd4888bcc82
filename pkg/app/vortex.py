"""
Vortex bound states phi_w = e^{i m theta} rho_w(r) with prescribed w and m.

The outer loop alternates two steps until the iterates settle:

  Step 2: minimise the linearized rotating-frame functional
          H^n(phi) = int |grad phi|^2 + V|phi|^2 + beta(|phi^n|^2)|phi|^2
                     - Omega conj(phi) L_z phi,      Omega = w / m,
          on the unit L2 sphere by a backward-Euler normalized gradient flow;
  Step 3: rescale the minimiser so that
          int |grad phi|^2 + V|phi|^2 + beta(|phi|^2)|phi|^2 = w ||phi||^2.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.fft as sfft
from errors import GridMismatchError, NonConvergenceError, VortexBranchError
from scipy.ndimage import map_coordinates
from scipy.optimize import brentq
from scipy.sparse.linalg import LinearOperator, gmres
from schemas import IterationStat, StopRule, VortexConfig, VortexSolveReport
from spectral import (
    AnyNonlinearity,
    ComplexField,
    Potential,
    SpectralGrid,
    angular_sector_projection,
    apply_lz,
    inner,
    kinetic_energy,
    l2_norm,
    laplacian,
)

logger = logging.getLogger(__name__)

# Relative tolerance of each backward-Euler solve inside the gradient flow
FLOW_KRYLOV_RTOL = 1e-12
FLOW_KRYLOV_RESTART = 50
FLOW_KRYLOV_CYCLES = 20
# A pseudo-time solve that GMRES leaves above this residual is treated as a
# flow that has no ground state to settle on
FLOW_STEP_FAIL_RTOL = 1e-6

SCALE_BRACKET_LIMIT = 1e6


@dataclass(frozen=True)
class VortexProblem:
    """
    Everything that defines one vortex solve.

    Attributes:
        grid: Discretisation of the truncated plane
        potential: Radial external potential V
        nonlinearity: Interaction beta and its derivatives
        w: Prescribed energy (frequency)
        m: Spin index, m >= 1
        epsilon: Stopping threshold of the selected rule
        stop_rule: Cauchy (iterate change) or residue (stationary residual)
        max_outer_iters: Outer iteration cap
        pseudo_dt: Pseudo-time step of the gradient flow
        inner_tol: Gradient-flow tolerance; min(1e-9, epsilon / 100) if unset
        max_inner_iters: Gradient-flow iteration cap
        flow_steps: Fixed number of gradient-flow steps per outer iteration;
            None runs the flow until it settles
        max_total_flow_steps: Gradient-flow steps allowed over the whole solve
        max_inconsistent_iters: Consecutive wrong-sign Step-3 ratios tolerated
    """

    grid: SpectralGrid
    potential: Potential
    nonlinearity: AnyNonlinearity
    w: float
    m: int
    epsilon: float
    stop_rule: StopRule = StopRule.RESIDUE
    max_outer_iters: int = 1000
    pseudo_dt: float = 0.01
    inner_tol: Optional[float] = None
    max_inner_iters: int = 50000
    flow_steps: Optional[int] = None
    max_total_flow_steps: int = 200000
    max_inconsistent_iters: int = 5

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"spin index m must be >= 1, got {self.m}")
        if self.flow_steps is not None and self.flow_steps < 1:
            raise ValueError("flow_steps must be >= 1 when set")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not math.isfinite(self.w / self.m):
            raise ValueError("rotation frequency w/m must be finite")

    @property
    def omega(self) -> float:
        return self.w / self.m

    @property
    def flow_tol(self) -> float:
        if self.inner_tol is not None:
            return self.inner_tol
        return min(1e-9, self.epsilon / 100.0)

    @cached_property
    def potential_values(self) -> np.ndarray:
        return self.potential.sample(self.grid)


def problem_from_config(config: VortexConfig) -> VortexProblem:
    """Build a VortexProblem from a validated config."""
    return VortexProblem(
        grid=config.make_grid(),
        potential=config.make_potential(),
        nonlinearity=config.make_nonlinearity(),
        w=config.w,
        m=config.m,
        epsilon=config.epsilon,
        stop_rule=config.stop_rule,
        max_outer_iters=config.max_outer_iters,
        pseudo_dt=config.pseudo_dt,
        inner_tol=config.inner_tol,
        max_inner_iters=config.max_inner_iters,
        flow_steps=config.flow_steps,
        max_total_flow_steps=config.max_total_flow_steps,
        max_inconsistent_iters=config.max_inconsistent_iters,
    )


def _zero_origin(grid: SpectralGrid, values: np.ndarray) -> np.ndarray:
    origin = grid.origin_index
    if origin is not None:
        values[origin] = 0.0
    return values


def initial_guess(
    problem: VortexProblem, prior: Optional[ComplexField] = None
) -> ComplexField:
    """
    Starting iterate phi^0 of the outer loop.

    m = 1:            (x + iy) exp(-|x|^2)
    m > 1, prior phi: phi^m / ||phi||_inf^m
    m > 1, no prior:  (x + iy)^m exp(-|x|^2)

    The origin sample is set to exactly zero.
    """
    grid = problem.grid
    z = grid.X + 1j * grid.Y
    if problem.m == 1:
        values = z * np.exp(-grid.r**2)
    elif prior is not None:
        if prior.grid != grid:
            raise GridMismatchError("prior vortex lives on a different grid")
        values = (prior.values / prior.sup()) ** problem.m
    else:
        values = z**problem.m * np.exp(-grid.r**2)
    return ComplexField(grid, _zero_origin(grid, np.array(values)))


def _frozen_potential(phi_prev: ComplexField, problem: VortexProblem) -> np.ndarray:
    return problem.potential_values + problem.nonlinearity.beta(phi_prev.density())


def rotating_hamiltonian(
    psi: ComplexField, frozen: np.ndarray, problem: VortexProblem
) -> ComplexField:
    """(-Delta + V + beta(|phi^n|^2) - Omega L_z) psi with the frozen part given."""
    return -laplacian(psi) + frozen * psi - problem.omega * apply_lz(psi)


def hamiltonian_energy(
    phi: ComplexField, phi_prev: ComplexField, problem: VortexProblem
) -> float:
    """Value of the linearized functional H^n at phi."""
    frozen = _frozen_potential(phi_prev, problem)
    potential_part = float(np.sum(frozen * phi.density())) * phi.grid.cell_area
    rotation = inner(apply_lz(phi), phi)
    return kinetic_energy(phi) + potential_part - problem.omega * rotation


def linearized_ground_state(
    phi_prev: ComplexField, problem: VortexProblem
) -> ComplexField:
    """
    Minimiser of H^n on the unit L2 sphere (Step 2).

    Normalized gradient flow: each pseudo-time step solves
    (I + dt H^n) phi = phi_old by preconditioned GMRES, projects onto the
    quarter-turn sector of the spin index and renormalises. The flow starts
    from phi_prev / ||phi_prev|| and stops once the sup-norm change of one
    step drops below the inner tolerance, or after flow_steps steps when the
    problem fixes that number.

    Raises:
        VortexBranchError: If phi_prev vanishes
        NonConvergenceError: If the flow does not settle within the cap, or a
            pseudo-time solve fails because I + dt H^n is indefinite
    """
    return _gradient_flow(phi_prev, problem, problem.max_inner_iters)[0]


def _gradient_flow(
    phi_prev: ComplexField, problem: VortexProblem, budget: int
) -> tuple[ComplexField, int]:
    """The flow of linearized_ground_state capped at `budget` steps; returns the steps taken."""
    norm_prev = l2_norm(phi_prev)
    if norm_prev == 0.0:
        raise VortexBranchError("previous iterate vanished", last_iterate=phi_prev)

    grid = problem.grid
    shape = grid.shape
    size = grid.nx * grid.ny
    dt = problem.pseudo_dt
    frozen = _frozen_potential(phi_prev, problem)

    def matvec(v: np.ndarray) -> np.ndarray:
        psi = ComplexField(grid, v.reshape(shape))
        return (psi + dt * rotating_hamiltonian(psi, frozen, problem)).values.ravel()

    symbol = 1.0 + dt * grid.k2

    def precondition(v: np.ndarray) -> np.ndarray:
        return sfft.ifft2(sfft.fft2(v.reshape(shape)) / symbol).ravel()

    operator = LinearOperator((size, size), matvec=matvec, dtype=np.complex128)
    preconditioner = LinearOperator(
        (size, size), matvec=precondition, dtype=np.complex128
    )

    phi = angular_sector_projection(phi_prev, problem.m)
    phi = phi / l2_norm(phi)
    tol = problem.flow_tol
    limit = problem.max_inner_iters
    if problem.flow_steps is not None:
        limit = min(limit, problem.flow_steps)
    cap = min(limit, budget)
    for iteration in range(1, cap + 1):
        rhs = phi.values.ravel()
        solution, info = gmres(
            operator,
            rhs,
            x0=rhs,
            rtol=FLOW_KRYLOV_RTOL,
            atol=0.0,
            restart=FLOW_KRYLOV_RESTART,
            maxiter=FLOW_KRYLOV_CYCLES,
            M=preconditioner,
        )
        if info != 0:
            defect = np.linalg.norm(matvec(solution) - rhs) / np.linalg.norm(rhs)
            logger.debug(
                "gradient-flow solve stopped early (info=%d, residual %.2e)",
                info,
                defect,
            )
            if defect > FLOW_STEP_FAIL_RTOL:
                raise NonConvergenceError(
                    f"gradient-flow step {iteration} failed with residual "
                    f"{defect:.2e}; the rotating Hamiltonian at w={problem.w} "
                    "may be unbounded below",
                    last_iterate=phi,
                )
        stepped = angular_sector_projection(
            ComplexField(grid, solution.reshape(shape)), problem.m
        )
        stepped = stepped / l2_norm(stepped)
        change = (stepped - phi).sup()
        phi = stepped
        if change <= tol:
            logger.debug("gradient flow settled after %d steps", iteration)
            return phi, iteration
    if cap < limit:
        raise NonConvergenceError(
            f"vortex solve used up its {problem.max_total_flow_steps} "
            "gradient-flow steps",
            last_iterate=phi,
        )
    if problem.flow_steps is not None:
        return phi, cap
    raise NonConvergenceError(
        f"gradient flow did not settle within {problem.max_inner_iters} steps",
        last_iterate=phi,
    )


def _scaling_terms(
    phi_tilde: ComplexField, problem: VortexProblem
) -> tuple[float, np.ndarray]:
    """w - int(|grad phi|^2 + V|phi|^2) and the density |phi|^2."""
    density = phi_tilde.density()
    quadratic = kinetic_energy(phi_tilde) + float(
        np.sum(problem.potential_values * density)
    ) * phi_tilde.grid.cell_area
    return problem.w - quadratic, density


def _scale(phi_tilde: ComplexField, problem: VortexProblem) -> tuple[float, bool]:
    """Scaling constant c^n and whether the power-law ratio had the wrong sign."""
    numerator, density = _scaling_terms(phi_tilde, problem)
    cell = phi_tilde.grid.cell_area
    nonlinearity = problem.nonlinearity

    if nonlinearity.is_power_law:
        p = nonlinearity.p
        denominator = nonlinearity.lam * float(np.sum(density ** (p + 1.0))) * cell
        if denominator == 0.0:
            raise VortexBranchError(
                "Step-3 scaling undefined: lambda or int |phi|^(2p+2) is zero",
                last_iterate=phi_tilde,
            )
        ratio = numerator / denominator
        inconsistent = ratio < 0
        if inconsistent:
            logger.warning(
                "inconsistent branch: Step-3 ratio %.3e is negative at w=%g",
                ratio,
                problem.w,
            )
        return abs(ratio) ** (1.0 / (2.0 * p)), inconsistent

    def mismatch(c: float) -> float:
        return float(np.sum(nonlinearity.beta(c * c * density) * density)) * cell - numerator

    at_zero = mismatch(0.0)
    if at_zero == 0.0:
        return 0.0, False
    upper = 1.0
    while math.copysign(1.0, mismatch(upper)) == math.copysign(1.0, at_zero):
        upper *= 2.0
        if upper > SCALE_BRACKET_LIMIT:
            raise VortexBranchError(
                "Step-3 root not bracketed below 1e6", last_iterate=phi_tilde
            )
    return brentq(mismatch, 0.0, upper, xtol=1e-14, rtol=1e-14), False


def energy_scale_constant(phi_tilde: ComplexField, problem: VortexProblem) -> float:
    """
    Scaling constant c^n of Step 3.

    Power law: c = |(w - int |grad phi|^2 + V|phi|^2) / (lam int |phi|^(2p+2))|^(1/2p).
    Other nonlinearities: the root in c of
    int beta(c^2 |phi|^2) |phi|^2 = w - int |grad phi|^2 + V|phi|^2.
    """
    return _scale(phi_tilde, problem)[0]


def residual(phi: ComplexField, problem: VortexProblem) -> ComplexField:
    """e_res = -Delta phi + V phi + beta(|phi|^2) phi - w phi."""
    coefficient = (
        problem.potential_values
        + problem.nonlinearity.beta(phi.density())
        - problem.w
    )
    return -laplacian(phi) + coefficient * phi


def step3_identity_defect(phi: ComplexField, problem: VortexProblem) -> float:
    """
    Relative defect of int |grad phi|^2 + V|phi|^2 + beta(|phi|^2)|phi|^2 = w ||phi||^2.
    """
    density = phi.density()
    cell = phi.grid.cell_area
    kinetic = kinetic_energy(phi)
    potential = float(np.sum(problem.potential_values * density)) * cell
    interaction = float(np.sum(problem.nonlinearity.beta(density) * density)) * cell
    mass = float(np.sum(density)) * cell
    scale = kinetic + abs(potential) + abs(interaction) + abs(problem.w) * mass
    if scale == 0.0:
        return 0.0
    return abs(kinetic + potential + interaction - problem.w * mass) / scale


def solve_vortex(
    problem: VortexProblem,
    prior: Optional[ComplexField] = None,
    warm_start: Optional[ComplexField] = None,
) -> tuple[ComplexField, VortexSolveReport]:
    """
    Iterate Steps 2 and 3 until the selected stopping quantity drops below epsilon.

    Args:
        problem: Vortex problem
        prior: m = 1 vortex used to build the initial guess for m > 1
        warm_start: Starting iterate that replaces the initial guess

    Returns:
        The vortex and its solve report

    Raises:
        VortexBranchError: If the scaling collapses the iterate to zero, or the
            Step-3 ratio keeps the wrong sign for max_inconsistent_iters
            consecutive iterations
        NonConvergenceError: If max_outer_iters or the gradient-flow budget is
            exhausted, or the flow itself fails

    Every error raised from the outer loop carries the report so far.
    """
    if warm_start is not None:
        if warm_start.grid != problem.grid:
            raise GridMismatchError("warm start lives on a different grid")
        phi = warm_start
    else:
        phi = initial_guess(problem, prior)

    history: list[IterationStat] = []
    inconsistent = False
    wrong_sign_run = 0
    converged = False
    residue_sup = cauchy_sup = math.inf
    budget = problem.max_total_flow_steps

    def make_report() -> VortexSolveReport:
        return VortexSolveReport(
            n_tol=len(history),
            residue_sup=residue_sup,
            cauchy_sup=cauchy_sup,
            converged=converged,
            stop_rule=problem.stop_rule,
            epsilon=problem.epsilon,
            inconsistent_branch=inconsistent,
            history=history,
        )

    for n in range(1, problem.max_outer_iters + 1):
        try:
            phi_tilde, used = _gradient_flow(phi, problem, budget)
            budget -= used
            c, flagged = _scale(phi_tilde, problem)
        except NonConvergenceError as e:
            e.report = make_report()
            raise
        inconsistent = inconsistent or flagged
        wrong_sign_run = wrong_sign_run + 1 if flagged else 0
        if c == 0.0:
            raise VortexBranchError(
                f"Step-3 scaling vanished at iteration {n} (w={problem.w})",
                last_iterate=phi,
                report=make_report(),
            )
        updated = c * phi_tilde
        cauchy_sup = (updated - phi).sup()
        residue_sup = residual(updated, problem).sup()
        phi = updated
        history.append(
            IterationStat(iteration=n, residue_sup=residue_sup, cauchy_sup=cauchy_sup)
        )
        logger.info(
            "vortex m=%d w=%g iteration %d: residue %.3e cauchy %.3e",
            problem.m,
            problem.w,
            n,
            residue_sup,
            cauchy_sup,
        )
        stop_value = residue_sup if problem.stop_rule is StopRule.RESIDUE else cauchy_sup
        if stop_value <= problem.epsilon:
            converged = True
            break
        if wrong_sign_run >= problem.max_inconsistent_iters:
            raise VortexBranchError(
                f"Step-3 ratio had the wrong sign for {wrong_sign_run} consecutive "
                f"iterations; no vortex with w={problem.w} on this branch",
                last_iterate=phi,
                report=make_report(),
            )

    report = make_report()
    if not converged:
        raise NonConvergenceError(
            f"vortex iteration did not converge in {problem.max_outer_iters} steps",
            last_iterate=phi,
            report=report,
        )
    if inconsistent:
        logger.warning("vortex converged but crossed an inconsistent Step-3 branch")
    return phi, report


def solve_vortex_family(
    problem: VortexProblem, m_values: tuple[int, ...] = (1, 2, 3)
) -> dict[int, tuple[ComplexField, VortexSolveReport]]:
    """Solve m = 1 first and use it as the prior for every higher spin index."""
    base_phi, base_report = solve_vortex(replace(problem, m=1))
    family = {1: (base_phi, base_report)}
    for m in m_values:
        if m == 1:
            continue
        family[m] = solve_vortex(replace(problem, m=m), prior=base_phi)
    return {m: family[m] for m in m_values}


def phase_winding(
    field: ComplexField, radius: Optional[float] = None, samples: int = 720
) -> float:
    """
    Accumulated argument of the field along a circle about the origin.

    The radius defaults to a quarter of the x-extent. Samples on the circle
    come from cubic-spline interpolation with periodic wrap.
    """
    grid = field.grid
    if radius is None:
        radius = grid.lx / 4.0
    angles = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
    cols = (radius * np.cos(angles) - grid.xmin) / grid.dx
    rows = (radius * np.sin(angles) - grid.ymin) / grid.dy
    coords = np.vstack([rows, cols])
    real = map_coordinates(field.values.real, coords, order=3, mode="grid-wrap")
    imag = map_coordinates(field.values.imag, coords, order=3, mode="grid-wrap")
    z = real + 1j * imag
    increments = np.angle(np.roll(z, -1) / z)
    return float(np.sum(increments))


def ring_radius(field: ComplexField) -> float:
    """Distance from the origin of the |phi| maximum."""
    index = np.unravel_index(np.argmax(field.modulus()), field.grid.shape)
    return float(field.grid.r[index])


def core_ratio(field: ComplexField) -> float:
    """|phi| at the sample nearest the origin relative to ||phi||_inf."""
    grid = field.grid
    index = np.unravel_index(np.argmin(grid.r), grid.shape)
    return float(abs(field.values[index])) / field.sup()


def modulus_asymmetry(field: ComplexField) -> float:
    """sup | |phi(x, y)| - |phi(y, x)| | relative to ||phi||_inf on a square grid."""
    modulus = field.modulus()
    return float(np.max(np.abs(modulus - modulus.T))) / field.sup()
