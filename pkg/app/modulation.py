"""
Modulation equations: collective coordinates (w, gamma) coupled to radiation R.

The NLS solution is carried as u = exp(-i alpha) (phi_w + R) with
alpha(t) = int_0^t w ds - gamma(t). Each step solves the 2x2 rate system
A (w', gamma')^T = G for the collective coordinates by a central difference,
then advances R with the Laplacian implicit and every vortex coupling explicit:

    (I - i tau Delta) R^{n+1} = (I + i tau Delta) R^{n-1} + 2 tau E^n,

    E^n = -i (V + beta(|phi|^2)) R^n + i (w^n - gamma') R^n - g^n
          - i gamma' phi - w' d phi / dw,

which is diagonal in Fourier space with symbol 1 + i tau |k|^2.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft
from elliptic import KrylovSettings, VortexBundle, build_bundle
from errors import (
    ModulationDegeneracyError,
    NonConvergenceError,
    TrajectoryBoundError,
)
from schemas import StepDiagnostics
from spectral import (
    AnyNonlinearity,
    ComplexField,
    apply_lz,
    inner,
    laplacian,
    norms,
)
from vortex import solve_vortex

logger = logging.getLogger(__name__)

ORTHOGONALITY_WARN = 1e-2


@dataclass(frozen=True)
class ModulationState:
    """
    One time level of the coupled system.

    phase_quad is the running trapezoidal value of int_0^t w ds.
    """

    n: int
    t: float
    w: float
    gamma: float
    R: ComplexField
    phase_quad: float = 0.0


@dataclass(frozen=True)
class RateSystem:
    """A (w', gamma')^T = G with a 2x2 real A and a real 2-vector G."""

    a: np.ndarray
    g: np.ndarray

    @property
    def det(self) -> float:
        return float(self.a[0, 0] * self.a[1, 1] - self.a[0, 1] * self.a[1, 0])

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.a)))


def _linear_coupling(
    phi: ComplexField, R: ComplexField, nonlinearity: AnyNonlinearity, sign: float
) -> ComplexField:
    """beta'(|phi|^2) (|phi|^2 R + sign * phi^2 conj(R))."""
    density = phi.density()
    values = nonlinearity.dbeta(density) * (
        density * R.values + sign * phi.values**2 * np.conj(R.values)
    )
    return R.with_values(values)


def nonlinear_remainder(
    phi: ComplexField, R: ComplexField, nonlinearity: AnyNonlinearity
) -> ComplexField:
    """
    N = beta(|phi + R|^2)(phi + R) - beta(|phi|^2)(phi + R)
        - beta'(|phi|^2)(|phi|^2 R + phi^2 conj(R)).
    """
    u = phi + R
    difference = nonlinearity.beta(u.density()) - nonlinearity.beta(phi.density())
    return difference * u - _linear_coupling(phi, R, nonlinearity, 1.0)


def g_term(
    phi: ComplexField, R: ComplexField, nonlinearity: AnyNonlinearity
) -> ComplexField:
    """g = i N + i beta'(|phi|^2)(|phi|^2 R + phi^2 conj(R))."""
    remainder = nonlinear_remainder(phi, R, nonlinearity)
    return 1j * (remainder + _linear_coupling(phi, R, nonlinearity, 1.0))


def f_term(
    phi: ComplexField, R: ComplexField, nonlinearity: AnyNonlinearity
) -> ComplexField:
    """f = beta'(|phi|^2)(|phi|^2 R - phi^2 conj(R)) - N."""
    remainder = nonlinear_remainder(phi, R, nonlinearity)
    return _linear_coupling(phi, R, nonlinearity, -1.0) - remainder


def assemble_rate_system(bundle: VortexBundle, R: ComplexField) -> RateSystem:
    """
    A = [[<dphi, phi - R>, <iR, phi>], [-<R, i d2phi>, <dphi, phi + R>]],
    G = (-<g, phi>, <f, dphi>).
    """
    phi, dphi, d2phi = bundle.phi, bundle.dphi, bundle.d2phi
    nonlinearity = bundle.nonlinearity
    a = np.array(
        [
            [inner(dphi, phi - R), inner(1j * R, phi)],
            [-inner(R, 1j * d2phi), inner(dphi, phi + R)],
        ]
    )
    g = np.array(
        [
            -inner(g_term(phi, R, nonlinearity), phi),
            inner(f_term(phi, R, nonlinearity), dphi),
        ]
    )
    return RateSystem(a=a, g=g)


def solve_rates(
    system: RateSystem, det_tol: float = 1e-12, time: float = 0.0
) -> tuple[float, float]:
    """
    (w', gamma') by Cramer's rule.

    Raises:
        ModulationDegeneracyError: If |det A| <= det_tol * max|A_ij|^2
    """
    det = system.det
    scale = system.scale
    if scale == 0.0 or abs(det) <= det_tol * scale**2:
        raise ModulationDegeneracyError(
            f"rate matrix degenerate at t={time:.6g} (det A = {det:.3e}); "
            "the vortex may have left the orbitally stable regime",
            time=time,
        )
    (a11, a12), (a21, a22) = system.a
    g1, g2 = system.g
    w_dot = (g1 * a22 - a12 * g2) / det
    gamma_dot = (a11 * g2 - a21 * g1) / det
    return float(w_dot), float(gamma_dot)


def project_initial_radiation(chi: ComplexField, bundle: VortexBundle) -> ComplexField:
    """
    R0 = chi - <chi, phi>/||phi||^2 phi - <chi, i dphi>/||dphi||^2 i dphi.

    phi and i dphi are orthogonal because dphi shares the phase of phi, so the
    two projections are independent.
    """
    phi = bundle.phi
    i_dphi = 1j * bundle.dphi
    along_phi = inner(chi, phi) / inner(phi, phi)
    along_dphi = inner(chi, i_dphi) / inner(i_dphi, i_dphi)
    return chi - along_phi * phi - along_dphi * i_dphi


def explicit_remainder(
    bundle: VortexBundle,
    R: ComplexField,
    w: float,
    w_dot: float,
    gamma_dot: float,
) -> ComplexField:
    """Every term of the radiation equation except i Delta R, at one time level."""
    phi = bundle.phi
    coupling = bundle.potential_values + bundle.nonlinearity.beta(phi.density())
    return (
        -1j * coupling * R
        + 1j * (w - gamma_dot) * R
        - g_term(phi, R, bundle.nonlinearity)
        - 1j * gamma_dot * phi
        - w_dot * bundle.dphi
    )


def implicit_radiation_update(
    r_prev: ComplexField, forcing: ComplexField, tau: float
) -> ComplexField:
    """Solve (I - i tau Delta) R_next = (I + i tau Delta) r_prev + 2 tau forcing."""
    grid = r_prev.grid
    symbol = 1j * tau * grid.k2
    spectrum = (1.0 - symbol) * sfft.fft2(r_prev.values) + 2.0 * tau * sfft.fft2(
        forcing.values
    )
    return ComplexField(grid, sfft.ifft2(spectrum / (1.0 + symbol)))


def bootstrap_first_step(
    state0: ModulationState,
    bundle0: VortexBundle,
    tau: float,
    det_tol: float = 1e-12,
) -> ModulationState:
    """Explicit Euler start: (w, gamma) and R at t1 from the rates at t0."""
    w_dot, gamma_dot = solve_rates(
        assemble_rate_system(bundle0, state0.R), det_tol, state0.t
    )
    w1 = state0.w + tau * w_dot
    gamma1 = state0.gamma + tau * gamma_dot
    forcing = explicit_remainder(bundle0, state0.R, state0.w, w_dot, gamma_dot)
    R1 = state0.R + tau * (1j * laplacian(state0.R) + forcing)
    return ModulationState(
        n=state0.n + 1,
        t=state0.t + tau,
        w=w1,
        gamma=gamma1,
        R=R1,
        phase_quad=state0.phase_quad + 0.5 * tau * (state0.w + w1),
    )


def step(
    prev: ModulationState,
    curr: ModulationState,
    bundle_curr: VortexBundle,
    tau: float,
    det_tol: float = 1e-12,
) -> ModulationState:
    """
    One semi-implicit step from levels n-1 and n to n+1.

    The collective coordinates are advanced first; the central differences
    of w and gamma built from the new level then drive the radiation update.
    """
    if prev.n != curr.n - 1:
        raise ValueError("step needs two consecutive time levels")
    w_dot, gamma_dot = solve_rates(
        assemble_rate_system(bundle_curr, curr.R), det_tol, curr.t
    )
    w_next = prev.w + 2.0 * tau * w_dot
    gamma_next = prev.gamma + 2.0 * tau * gamma_dot
    central_w = (w_next - prev.w) / (2.0 * tau)
    central_gamma = (gamma_next - prev.gamma) / (2.0 * tau)

    forcing = explicit_remainder(bundle_curr, curr.R, curr.w, central_w, central_gamma)
    R_next = implicit_radiation_update(prev.R, forcing, tau)
    return ModulationState(
        n=curr.n + 1,
        t=curr.t + tau,
        w=w_next,
        gamma=gamma_next,
        R=R_next,
        phase_quad=curr.phase_quad + 0.5 * tau * (curr.w + w_next),
    )


def refresh_vortex(
    w_new: float,
    bundle_prev: VortexBundle,
    refresh_tol: float = 1e-8,
    settings: KrylovSettings = KrylovSettings(),
) -> VortexBundle:
    """
    Vortex bundle at w_new, warm-started from the previous one.

    The previous bundle is returned unchanged while |w_new - w_prev| < refresh_tol.
    """
    if abs(w_new - bundle_prev.w) < refresh_tol:
        return bundle_prev
    problem = replace(bundle_prev.problem, w=w_new)
    phi, report = solve_vortex(problem, warm_start=bundle_prev.phi)
    logger.info(
        "refreshed vortex at w=%.10g in %d iterations (residue %.2e)",
        w_new,
        report.n_tol,
        report.residue_sup,
    )
    return build_bundle(problem, phi, settings, previous=bundle_prev)


def reconstruct_u(state: ModulationState, bundle: VortexBundle) -> ComplexField:
    """u^n = exp(-i tau (w^0/2 + w^n/2 + sum w^j) + i gamma^n) (phi_{w^n} + R^n)."""
    phase = np.exp(-1j * state.phase_quad + 1j * state.gamma)
    return phase * (bundle.phi + state.R)


def trapezoid_phase(w_history: list[float], tau: float) -> float:
    """tau (w^0/2 + w^n/2 + sum_{j=1}^{n-1} w^j) for a stored w history."""
    if len(w_history) < 2:
        return 0.0
    return tau * (0.5 * w_history[0] + 0.5 * w_history[-1] + sum(w_history[1:-1]))


def diagnose(
    state: ModulationState, bundle: VortexBundle, det_tol: float = 1e-12
) -> StepDiagnostics:
    """Run-log row: norms of R, det A, orthogonality and rotation of R."""
    R = state.R
    r_norms = norms(R)
    phi_norm = norms(bundle.phi).l2
    dphi_norm = norms(bundle.dphi).l2
    system = assemble_rate_system(bundle, R)
    if r_norms.l2 > 0.0:
        orth_phi = abs(inner(R, bundle.phi)) / (r_norms.l2 * phi_norm)
        orth_dphi = abs(inner(R, 1j * bundle.dphi)) / (r_norms.l2 * dphi_norm)
        radiation_lz = inner(R, apply_lz(R)) / r_norms.l2**2
    else:
        orth_phi = orth_dphi = radiation_lz = 0.0
    if orth_phi > ORTHOGONALITY_WARN:
        logger.warning("orthogonality drift %.2e at t=%.4g", orth_phi, state.t)
    return StepDiagnostics(
        n=state.n,
        t=state.t,
        w=state.w,
        gamma=state.gamma,
        r_sup=r_norms.sup,
        r_l2=r_norms.l2,
        det_a=system.det,
        orth_phi=orth_phi,
        orth_dphi=orth_dphi,
        radiation_lz=radiation_lz,
    )


StepCallback = Callable[[ModulationState, VortexBundle, StepDiagnostics], None]


@dataclass
class ModulationRun:
    """Outcome of an integration: run log, w history and the final level."""

    history: list[StepDiagnostics] = field(default_factory=list)
    w_history: list[float] = field(default_factory=list)
    final: Optional[ModulationState] = None
    bundle: Optional[VortexBundle] = None


class ModulationIntegrator:
    """
    Drives the modulation scheme from t = 0 to t_end.

    Args:
        bundle0: Vortex bundle at w0
        tau: Time step
        refresh_tol: w drift below which the bundle is reused
        det_tol: Relative degeneracy threshold of the rate matrix
        w_bound_factor: |w| may not exceed this multiple of |w0|
        krylov: Settings of the derivative solves on refresh
    """

    def __init__(
        self,
        bundle0: VortexBundle,
        tau: float,
        *,
        refresh_tol: float = 1e-8,
        det_tol: float = 1e-12,
        w_bound_factor: float = 10.0,
        krylov: KrylovSettings = KrylovSettings(),
    ):
        if not tau > 0:
            raise ValueError("time step must be positive")
        self.bundle0 = bundle0
        self.tau = tau
        self.refresh_tol = refresh_tol
        self.det_tol = det_tol
        self.w_bound = w_bound_factor * (abs(bundle0.w) or 1.0)
        self.krylov = krylov

    def initial_state(self, gamma0: float, R0: ComplexField) -> ModulationState:
        return ModulationState(n=0, t=0.0, w=self.bundle0.w, gamma=gamma0, R=R0)

    def _check_bound(self, state: ModulationState) -> None:
        if not abs(state.w) <= self.w_bound:
            raise TrajectoryBoundError(
                f"|w| = {abs(state.w):.4g} exceeded bound {self.w_bound:.4g} "
                f"at t={state.t:.6g}",
                time=state.t,
            )

    def _refresh(self, state: ModulationState, bundle: VortexBundle) -> VortexBundle:
        try:
            return refresh_vortex(state.w, bundle, self.refresh_tol, self.krylov)
        except NonConvergenceError as e:
            raise type(e)(
                f"vortex refresh failed at t={state.t:.6g}, w={state.w:.10g}: {e}",
                last_iterate=e.last_iterate,
                report=e.report,
            ) from e

    def run(
        self,
        state0: ModulationState,
        t_end: float,
        on_step: Optional[StepCallback] = None,
    ) -> ModulationRun:
        """Integrate to t_end; on_step sees every level including t = 0."""
        n_steps = int(round(t_end / self.tau))
        result = ModulationRun()

        def record(state: ModulationState, bundle: VortexBundle) -> None:
            diagnostics = diagnose(state, bundle, self.det_tol)
            result.history.append(diagnostics)
            result.w_history.append(state.w)
            if on_step is not None:
                on_step(state, bundle, diagnostics)

        bundle = self.bundle0
        record(state0, bundle)
        result.final, result.bundle = state0, bundle
        if n_steps == 0:
            return result

        prev = state0
        curr = bootstrap_first_step(state0, bundle, self.tau, self.det_tol)
        self._check_bound(curr)
        bundle = self._refresh(curr, bundle)
        record(curr, bundle)
        for _ in range(n_steps - 1):
            nxt = step(prev, curr, bundle, self.tau, self.det_tol)
            self._check_bound(nxt)
            bundle = self._refresh(nxt, bundle)
            record(nxt, bundle)
            prev, curr = curr, nxt
        result.final, result.bundle = curr, bundle
        return result
