"""
Matrix-free solves for the w-derivatives of a vortex.

Both derivatives satisfy L psi = rhs with the real-coefficient operator
    L = -Delta + V + beta(|phi|^2) + 2 beta'(|phi|^2) |phi|^2 - w,
valid because d phi / dw shares the e^{i m theta} phase of phi. The solves use
restarted GMRES preconditioned by the Fourier-diagonal (-Delta + shift)^{-1}.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.fft as sfft
from errors import NearSingularOperatorError
from scipy.sparse.linalg import LinearOperator, gmres
from schemas import DerivativeReport
from spectral import ComplexField, l2_norm, laplacian
from vortex import VortexProblem

logger = logging.getLogger(__name__)

PHASE_MASK = 1e-6
PHASE_LOCK_TOL = 1e-3


@dataclass(frozen=True)
class KrylovSettings:
    """GMRES parameters: relative tolerance, restart length, total iteration cap."""

    tol: float = 1e-10
    restart: int = 50
    max_iters: int = 2000

    @property
    def cycles(self) -> int:
        return max(1, math.ceil(self.max_iters / self.restart))


@dataclass(frozen=True, eq=False)
class LinearizedOperator:
    """L psi = (-Delta + V + beta(|phi|^2) + 2 beta'(|phi|^2)|phi|^2 - w) psi."""

    problem: VortexProblem
    phi: ComplexField

    @property
    def grid(self):
        return self.problem.grid

    @property
    def w(self) -> float:
        return self.problem.w

    @cached_property
    def coefficient(self) -> np.ndarray:
        density = self.phi.density()
        nonlinearity = self.problem.nonlinearity
        return (
            self.problem.potential_values
            + nonlinearity.beta(density)
            + 2.0 * nonlinearity.dbeta(density) * density
            - self.w
        )

    @property
    def shift(self) -> float:
        return max(1.0, abs(self.w))

    def apply(self, psi: ComplexField) -> ComplexField:
        return -laplacian(psi) + self.coefficient * psi

    def as_linear_operator(self) -> LinearOperator:
        grid = self.grid
        size = grid.nx * grid.ny

        def matvec(v: np.ndarray) -> np.ndarray:
            return self.apply(ComplexField(grid, v.reshape(grid.shape))).values.ravel()

        return LinearOperator((size, size), matvec=matvec, dtype=np.complex128)

    def preconditioner(self) -> LinearOperator:
        grid = self.grid
        size = grid.nx * grid.ny
        symbol = grid.k2 + self.shift

        def precondition(v: np.ndarray) -> np.ndarray:
            return sfft.ifft2(sfft.fft2(v.reshape(grid.shape)) / symbol).ravel()

        return LinearOperator((size, size), matvec=precondition, dtype=np.complex128)


@dataclass(frozen=True)
class KrylovResult:
    solution: ComplexField
    residual: float
    iterations: int


def krylov_solve(
    op: LinearizedOperator,
    rhs: ComplexField,
    settings: KrylovSettings = KrylovSettings(),
    x0: Optional[ComplexField] = None,
) -> KrylovResult:
    """
    Solve op psi = rhs; the reported residual is ||L psi - rhs||_2 / ||rhs||_2.

    Raises:
        NearSingularOperatorError: If GMRES stagnates or hits its cap
    """
    iterations = 0

    def count(_residual_norm):
        nonlocal iterations
        iterations += 1

    start = None if x0 is None else x0.values.ravel()
    solution, info = gmres(
        op.as_linear_operator(),
        rhs.values.ravel(),
        x0=start,
        rtol=settings.tol,
        atol=0.0,
        restart=settings.restart,
        maxiter=settings.cycles,
        M=op.preconditioner(),
        callback=count,
        callback_type="pr_norm",
    )
    psi = ComplexField(op.grid, solution.reshape(op.grid.shape))
    rhs_norm = l2_norm(rhs)
    relative = l2_norm(op.apply(psi) - rhs) / rhs_norm if rhs_norm > 0 else 0.0
    if info != 0:
        raise NearSingularOperatorError(
            f"GMRES stopped after {iterations} iterations with relative residual "
            f"{relative:.3e}; w={op.w} may sit on a linearized eigenvalue"
        )
    logger.debug("GMRES converged in %d iterations (residual %.2e)", iterations, relative)
    return KrylovResult(psi, relative, iterations)


def solve_dw_phi(
    op: LinearizedOperator,
    settings: KrylovSettings = KrylovSettings(),
    x0: Optional[ComplexField] = None,
) -> KrylovResult:
    """d phi / dw from L psi = phi."""
    return krylov_solve(op, op.phi, settings, x0)


def dw2_rhs(op: LinearizedOperator, dphi: ComplexField) -> ComplexField:
    """2 psi - 6 beta'(|phi|^2)|psi|^2 phi - 4 beta''(|phi|^2)|phi psi|^2 phi."""
    phi = op.phi
    density = phi.density()
    nonlinearity = op.problem.nonlinearity
    dphi_density = dphi.density()
    cubic = 6.0 * nonlinearity.dbeta(density) * dphi_density
    quintic = 4.0 * nonlinearity.d2beta(density) * density * dphi_density
    return 2.0 * dphi - (cubic + quintic) * phi


def solve_dw2_phi(
    op: LinearizedOperator,
    dphi: ComplexField,
    settings: KrylovSettings = KrylovSettings(),
    x0: Optional[ComplexField] = None,
) -> KrylovResult:
    """d^2 phi / dw^2 from the same operator with the second-derivative source."""
    return krylov_solve(op, dw2_rhs(op, dphi), settings, x0)


def phase_locked(phi: ComplexField, dphi: ComplexField) -> bool:
    """
    True when arg(dphi) - arg(phi) is constant mod pi wherever both moduli
    exceed PHASE_MASK.
    """
    mask = (phi.modulus() > PHASE_MASK) & (dphi.modulus() > PHASE_MASK)
    if not np.any(mask):
        return True
    ratio = dphi.values[mask] / phi.values[mask]
    doubled = (ratio / np.abs(ratio)) ** 2
    reference = doubled[np.argmax(np.abs(phi.values[mask]))]
    return bool(np.max(np.abs(doubled - reference)) <= PHASE_LOCK_TOL)


@dataclass(frozen=True, eq=False)
class VortexBundle:
    """
    A frozen vortex and its first two w-derivatives.

    Attributes:
        w, m: Energy and spin index
        phi, dphi, d2phi: phi_w, d phi_w / dw, d^2 phi_w / dw^2
        solve_residuals: Relative residuals of the two elliptic solves
        problem: Problem the vortex solves, reused when w is refreshed
        report: Elliptic solve diagnostics
    """

    w: float
    m: int
    phi: ComplexField
    dphi: ComplexField
    d2phi: ComplexField
    solve_residuals: tuple[float, float]
    problem: VortexProblem
    report: Optional[DerivativeReport] = None

    @property
    def nonlinearity(self):
        return self.problem.nonlinearity

    @property
    def potential_values(self) -> np.ndarray:
        return self.problem.potential_values


def build_bundle(
    problem: VortexProblem,
    phi: ComplexField,
    settings: KrylovSettings = KrylovSettings(),
    previous: Optional[VortexBundle] = None,
) -> VortexBundle:
    """
    Solve for both w-derivatives of a converged vortex.

    When a previous bundle is given its derivatives seed the Krylov solves.
    """
    op = LinearizedOperator(problem, phi)
    first = solve_dw_phi(op, settings, previous.dphi if previous else None)
    second = solve_dw2_phi(
        op, first.solution, settings, previous.d2phi if previous else None
    )
    locked = phase_locked(phi, first.solution)
    if not locked:
        logger.warning("d phi/dw does not share the vortex phase at w=%g", problem.w)
    report = DerivativeReport(
        dphi_residual=first.residual,
        d2phi_residual=second.residual,
        dphi_iterations=first.iterations,
        d2phi_iterations=second.iterations,
        phase_locked=locked,
    )
    return VortexBundle(
        w=problem.w,
        m=problem.m,
        phi=phi,
        dphi=first.solution,
        d2phi=second.solution,
        solve_residuals=(first.residual, second.residual),
        problem=problem,
        report=report,
    )
