"""
Periodic pseudospectral core: grid, complex fields, Fourier operators, quadrature.

Every other module works on ComplexField values sampled on a SpectralGrid.
Fields are stored with shape (ny, nx), y outer, matching the binary dump layout.
Transforms go through scipy.fft so the worker count can be set by the caller
with ``scipy.fft.set_workers``; pocketfft splits work over independent 1-D
transforms, so results do not depend on the thread count.
"""

import enum
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
import scipy.fft as sfft
from errors import GridMismatchError, NonFiniteFieldError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralGrid:
    """
    Truncated periodic rectangle [xmin, xmax) x [ymin, ymax) with nx * ny samples.

    Attributes:
        xmin, xmax, ymin, ymax: Domain extents
        nx, ny: Even sample counts, at least 4 each
    """

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int
    ny: int

    def __post_init__(self):
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if n < 4 or n % 2:
                raise ValueError(f"{name} must be an even integer >= 4, got {n}")
        if not self.xmax > self.xmin or not self.ymax > self.ymin:
            raise ValueError("domain extents must satisfy xmax > xmin and ymax > ymin")

    @classmethod
    def square(cls, half_width: float, n: int) -> "SpectralGrid":
        """Grid on [-half_width, half_width]^2 with n samples per side."""
        return cls(-half_width, half_width, -half_width, half_width, n, n)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def lx(self) -> float:
        return self.xmax - self.xmin

    @property
    def ly(self) -> float:
        return self.ymax - self.ymin

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def cell_area(self) -> float:
        return self.area / (self.nx * self.ny)

    @property
    def is_square_centered(self) -> bool:
        """True when the quarter turn about the origin maps the grid onto itself."""
        return (
            self.nx == self.ny
            and self.xmin == -self.xmax
            and self.ymin == -self.ymax
            and self.xmax == self.ymax
        )

    @cached_property
    def x(self) -> np.ndarray:
        return self.xmin + self.dx * np.arange(self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return self.ymin + self.dy * np.arange(self.ny)

    @cached_property
    def X(self) -> np.ndarray:
        return np.meshgrid(self.x, self.y)[0]

    @cached_property
    def Y(self) -> np.ndarray:
        return np.meshgrid(self.x, self.y)[1]

    @cached_property
    def r(self) -> np.ndarray:
        return np.hypot(self.X, self.Y)

    @cached_property
    def theta(self) -> np.ndarray:
        return np.arctan2(self.Y, self.X)

    @cached_property
    def kx(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.nx, d=self.dx)

    @cached_property
    def ky(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.ny, d=self.dy)

    @cached_property
    def k2(self) -> np.ndarray:
        KX, KY = np.meshgrid(self.kx, self.ky)
        return KX**2 + KY**2

    @cached_property
    def kx_odd(self) -> np.ndarray:
        # Nyquist mode zeroed for first derivatives
        kx = self.kx.copy()
        kx[self.nx // 2] = 0.0
        return np.meshgrid(kx, self.ky)[0]

    @cached_property
    def ky_odd(self) -> np.ndarray:
        ky = self.ky.copy()
        ky[self.ny // 2] = 0.0
        return np.meshgrid(self.kx, ky)[1]

    @cached_property
    def origin_index(self) -> Optional[tuple[int, int]]:
        """(iy, ix) of the sample sitting exactly at the origin, if any."""
        ix = np.flatnonzero(np.isclose(self.x, 0.0, atol=1e-12 * self.lx))
        iy = np.flatnonzero(np.isclose(self.y, 0.0, atol=1e-12 * self.ly))
        if ix.size and iy.size:
            return (int(iy[0]), int(ix[0]))
        return None

    def zeros(self) -> "ComplexField":
        return ComplexField(self, np.zeros(self.shape, dtype=np.complex128))

    def field(self, values) -> "ComplexField":
        return ComplexField(self, values)


Scalar = Union[int, float, complex]


@dataclass(frozen=True, eq=False)
class ComplexField:
    """
    Complex samples on a SpectralGrid.

    Values are copied on construction and frozen, so a field can be shared
    read-only. Arithmetic between two fields requires the identical grid.
    """

    grid: SpectralGrid
    values: np.ndarray

    # ndarray <op> field defers to the field operators
    __array_ufunc__ = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128, copy=True)
        if values.shape != self.grid.shape:
            raise ValueError(
                f"field shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteFieldError("field contains NaN or Inf samples")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def _other_values(self, other) -> Union[np.ndarray, Scalar]:
        if isinstance(other, ComplexField):
            if other.grid != self.grid:
                raise GridMismatchError("fields live on different grids")
            return other.values
        if isinstance(other, np.ndarray) and other.shape != self.grid.shape:
            raise GridMismatchError("array shape does not match the field grid")
        return other

    def with_values(self, values) -> "ComplexField":
        return ComplexField(self.grid, values)

    def __add__(self, other) -> "ComplexField":
        return self.with_values(self.values + self._other_values(other))

    __radd__ = __add__

    def __sub__(self, other) -> "ComplexField":
        return self.with_values(self.values - self._other_values(other))

    def __rsub__(self, other) -> "ComplexField":
        return self.with_values(self._other_values(other) - self.values)

    def __mul__(self, other) -> "ComplexField":
        return self.with_values(self.values * self._other_values(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Scalar) -> "ComplexField":
        return self.with_values(self.values / other)

    def __neg__(self) -> "ComplexField":
        return self.with_values(-self.values)

    def conj(self) -> "ComplexField":
        return self.with_values(np.conj(self.values))

    def modulus(self) -> np.ndarray:
        return np.abs(self.values)

    def density(self) -> np.ndarray:
        """|f|^2 as a real array."""
        return self.values.real**2 + self.values.imag**2

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __repr__(self) -> str:
        return f"<ComplexField({self.grid.ny}x{self.grid.nx}, sup={self.sup():.3e})>"


def _require_same_grid(f: ComplexField, g: ComplexField) -> None:
    if f.grid != g.grid:
        raise GridMismatchError("fields live on different grids")


def _power(rho: np.ndarray, q: float) -> np.ndarray:
    """rho**q for rho >= 0; samples with rho == 0 give 0 (1 when q == 0)."""
    rho = np.asarray(rho, dtype=float)
    if q == 0:
        return np.ones_like(rho)
    out = np.zeros_like(rho)
    positive = rho > 0
    out[positive] = rho[positive] ** q
    return out


@dataclass(frozen=True)
class Nonlinearity:
    """
    Power-law interaction beta(rho) = lam * rho**p.

    The cubic NLS is p = 1.
    """

    lam: float
    p: float = 1.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"power p must be positive, got {self.p}")

    @property
    def is_power_law(self) -> bool:
        return True

    def beta(self, rho: np.ndarray) -> np.ndarray:
        return self.lam * _power(rho, self.p)

    def dbeta(self, rho: np.ndarray) -> np.ndarray:
        return self.lam * self.p * _power(rho, self.p - 1.0)

    def d2beta(self, rho: np.ndarray) -> np.ndarray:
        if self.p == 1.0:
            return np.zeros_like(np.asarray(rho, dtype=float))
        return self.lam * self.p * (self.p - 1.0) * _power(rho, self.p - 2.0)


@dataclass(frozen=True)
class PolynomialNonlinearity:
    """
    Sum of power terms beta(rho) = sum_j lam_j * rho**p_j.

    Covers focusing-defocusing interactions such as -rho + rho**2. Step 3 of
    the vortex iteration has no closed form for it and falls back to a
    scalar root-find.
    """

    terms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("polynomial nonlinearity needs at least one term")
        object.__setattr__(
            self, "terms", tuple(Nonlinearity(lam, p) for lam, p in self.terms)
        )

    @property
    def is_power_law(self) -> bool:
        return False

    def beta(self, rho: np.ndarray) -> np.ndarray:
        return sum(term.beta(rho) for term in self.terms)

    def dbeta(self, rho: np.ndarray) -> np.ndarray:
        return sum(term.dbeta(rho) for term in self.terms)

    def d2beta(self, rho: np.ndarray) -> np.ndarray:
        return sum(term.d2beta(rho) for term in self.terms)


AnyNonlinearity = Union[Nonlinearity, PolynomialNonlinearity]


class PotentialKind(str, enum.Enum):
    """Radially symmetric external potentials."""

    HARMONIC = "harmonic"
    ZERO = "zero"
    GAUSSIAN_TRAP = "gaussian_trap"
    CUSTOM = "custom"


@dataclass(frozen=True)
class Potential:
    """
    Real radial potential V(|x|).

    harmonic:      V = strength * |x|^2
    zero:          V = 0
    gaussian_trap: V = strength * |x|^2 * exp(-decay * |x|^2)
    custom:        V = profile(|x|)
    """

    kind: PotentialKind
    strength: float = 0.5
    decay: float = math.sqrt(2.0)
    profile: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @classmethod
    def harmonic(cls, strength: float = 0.5) -> "Potential":
        return cls(PotentialKind.HARMONIC, strength=strength)

    @classmethod
    def zero(cls) -> "Potential":
        return cls(PotentialKind.ZERO, strength=0.0)

    @classmethod
    def gaussian_trap(
        cls, strength: float = 1.0, decay: float = math.sqrt(2.0)
    ) -> "Potential":
        return cls(PotentialKind.GAUSSIAN_TRAP, strength=strength, decay=decay)

    @classmethod
    def custom(cls, profile: Callable[[np.ndarray], np.ndarray]) -> "Potential":
        return cls(PotentialKind.CUSTOM, profile=profile)

    def sample(self, grid: SpectralGrid) -> np.ndarray:
        r = grid.r
        if self.kind is PotentialKind.HARMONIC:
            values = self.strength * r**2
        elif self.kind is PotentialKind.ZERO:
            values = np.zeros(grid.shape)
        elif self.kind is PotentialKind.GAUSSIAN_TRAP:
            values = self.strength * r**2 * np.exp(-self.decay * r**2)
        else:
            if self.profile is None:
                raise ValueError("custom potential needs a radial profile")
            values = np.asarray(self.profile(r), dtype=float)
        if values.shape != grid.shape or not np.all(np.isfinite(values)):
            raise ValueError("potential must be finite and real on the grid")
        return values


class FieldNorms(NamedTuple):
    l2: float
    sup: float


def forward(f: ComplexField) -> np.ndarray:
    """Unnormalized 2-D DFT of the samples."""
    return sfft.fft2(f.values)


def inverse(spectrum: np.ndarray, grid: SpectralGrid) -> ComplexField:
    return ComplexField(grid, sfft.ifft2(spectrum))


def laplacian(f: ComplexField) -> ComplexField:
    """Spectral Laplacian; the Nyquist mode is kept."""
    return inverse(-f.grid.k2 * forward(f), f.grid)


def apply_lz(f: ComplexField) -> ComplexField:
    """
    Angular momentum L_z f = -i (x df/dy - y df/dx).

    Meaningful for fields that vanish near the boundary, where the periodic
    extension of x and y is discontinuous.
    """
    grid = f.grid
    spectrum = forward(f)
    fx = sfft.ifft2(1j * grid.kx_odd * spectrum)
    fy = sfft.ifft2(1j * grid.ky_odd * spectrum)
    return ComplexField(grid, -1j * (grid.X * fy - grid.Y * fx))


def inner(f: ComplexField, g: ComplexField) -> float:
    """<f, g> = Re integral f conj(g), rectangle rule."""
    _require_same_grid(f, g)
    return float(np.sum(f.values * np.conj(g.values)).real) * f.grid.cell_area


def norms(f: ComplexField) -> FieldNorms:
    l2 = math.sqrt(float(np.sum(f.density())) * f.grid.cell_area)
    return FieldNorms(l2=l2, sup=f.sup())


def l2_norm(f: ComplexField) -> float:
    return norms(f).l2


def kinetic_energy(f: ComplexField) -> float:
    """Integral of |grad f|^2 by Parseval on the spectral coefficients."""
    spectrum = forward(f)
    power = spectrum.real**2 + spectrum.imag**2
    grid = f.grid
    return float(np.sum(grid.k2 * power)) * grid.cell_area / (grid.nx * grid.ny)


def radial_gaussian(
    grid: SpectralGrid, amplitude: float = 1.0, width: float = 1.0
) -> ComplexField:
    """amplitude * exp(-width |x|^2)."""
    return ComplexField(grid, amplitude * np.exp(-width * grid.r**2))


def quarter_turn(f: ComplexField) -> ComplexField:
    """
    g(x, y) = f(-y, x) on a square grid centred at the origin.

    The periodic sample set is invariant under the quarter turn, so this is
    an exact permutation of samples.
    """
    grid = f.grid
    if not grid.is_square_centered:
        raise GridMismatchError("quarter turn needs a square grid centred at 0")
    flipped = (-np.arange(grid.nx)) % grid.nx
    return ComplexField(grid, f.values.T[flipped, :])


def angular_sector_projection(f: ComplexField, m: int) -> ComplexField:
    """
    Keep the part of f that picks up the factor i**m under a quarter turn.

    A field e^{i m theta} rho(r) is left unchanged; components with winding
    not congruent to m mod 4 are removed. Grids without the quarter-turn
    symmetry are returned untouched.
    """
    if not f.grid.is_square_centered:
        return f
    character = (-1j) ** (m % 4)
    acc = f.values.copy()
    turned = f
    weight = 1.0 + 0j
    for _ in range(3):
        turned = quarter_turn(turned)
        weight *= character
        acc = acc + weight * turned.values
    return ComplexField(f.grid, acc / 4.0)
