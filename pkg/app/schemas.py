"""
Pydantic schemas for configuration files and solver reports.

Config files are flat YAML mappings. Every model forbids unknown keys, so a
misspelt key is reported instead of silently ignored.
"""

import enum
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, TypeVar, Union

import yaml
from errors import ConfigError
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from spectral import Nonlinearity, Potential, PotentialKind, SpectralGrid


class StopRule(str, enum.Enum):
    """Stopping quantity of the outer vortex iteration."""

    CAUCHY = "cauchy"
    RESIDUE = "residue"


class ExperimentName(str, enum.Enum):
    """Reproducible end-to-end experiments."""

    EG1_VORTEX = "eg1_vortex"
    EG2_VORTEX = "eg2_vortex"
    TABLE3_CONVERGENCE = "table3_convergence"
    SCATTERING_FREE = "scattering_free"
    TUNNELLING = "tunnelling"


class IterationStat(BaseModel):
    """One outer iteration of the vortex solver."""

    iteration: int
    residue_sup: float
    cauchy_sup: float


class VortexSolveReport(BaseModel):
    """Diagnostics of a vortex solve."""

    n_tol: int = Field(description="Outer iterations performed")
    residue_sup: float = Field(description="Sup-norm of the stationary residual")
    cauchy_sup: float = Field(description="Sup-norm of the last iterate change")
    converged: bool
    stop_rule: StopRule
    epsilon: float
    inconsistent_branch: bool = Field(
        False, description="Step-3 ratio had the wrong sign at some iteration"
    )
    history: list[IterationStat] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_converged_threshold(self):
        """A converged report must satisfy its own stopping rule."""
        if self.converged:
            value = (
                self.residue_sup
                if self.stop_rule is StopRule.RESIDUE
                else self.cauchy_sup
            )
            if value > self.epsilon:
                raise ValueError("converged report violates its stopping threshold")
        return self


class DerivativeReport(BaseModel):
    """Residuals of the two elliptic solves for the w-derivatives."""

    dphi_residual: float
    d2phi_residual: float
    dphi_iterations: int
    d2phi_iterations: int
    phase_locked: bool


class StepDiagnostics(BaseModel):
    """One row of the modulation run log."""

    n: int
    t: float
    w: float
    gamma: float
    r_sup: float
    r_l2: float
    det_a: float
    orth_phi: float
    orth_dphi: float
    radiation_lz: float


class ChiSpec(BaseModel):
    """Initial bump chi(x) = amplitude * exp(-width |x|^2) before projection."""

    model_config = ConfigDict(extra="forbid")

    amplitude: float = 0.25
    width: float = Field(1.0, gt=0)


class VortexConfig(BaseModel):
    """Configuration of a vortex solve (``vortex solve`` and friends)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    domain: tuple[float, float, float, float] = Field(
        (-8.0, 8.0, -8.0, 8.0), description="xmin, xmax, ymin, ymax or half-width"
    )
    nx: int = 128
    ny: int = 128
    potential: PotentialKind = PotentialKind.HARMONIC
    potential_scale: Optional[float] = Field(
        None, description="Coefficient of |x|^2; kind-specific default when unset"
    )
    trap_decay: float = Field(math.sqrt(2.0), gt=0)
    lam: float = Field(-0.5, alias="lambda")
    p: float = Field(1.0, gt=0)
    w: float = 1.1
    m: int = Field(1, ge=1)
    epsilon: float = Field(0.005, gt=0)
    stop_rule: StopRule = StopRule.RESIDUE
    prior_path: Optional[Path] = None
    max_outer_iters: int = Field(1000, ge=1)
    pseudo_dt: float = Field(0.01, gt=0)
    inner_tol: Optional[float] = Field(None, gt=0)
    max_inner_iters: int = Field(50000, ge=1)
    flow_steps: Optional[int] = Field(
        None, ge=1, description="Gradient-flow steps per outer iteration; unset runs to inner_tol"
    )
    max_total_flow_steps: int = Field(200000, ge=1)
    max_inconsistent_iters: int = Field(5, ge=1)
    krylov_tol: float = Field(1e-10, gt=0)
    krylov_restart: int = Field(50, ge=1)
    krylov_max_iters: int = Field(2000, ge=1)

    @field_validator("domain", mode="before")
    @classmethod
    def expand_half_width(cls, v):
        """Accept a scalar half-width L as the square [-L, L]^2."""
        if isinstance(v, (int, float)):
            if v <= 0:
                raise ValueError("domain half-width must be positive")
            return (-float(v), float(v), -float(v), float(v))
        return v

    @field_validator("domain")
    @classmethod
    def validate_domain(cls, v):
        """Extents must be ordered."""
        xmin, xmax, ymin, ymax = v
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("domain must satisfy xmax > xmin and ymax > ymin")
        return v

    @field_validator("nx", "ny")
    @classmethod
    def validate_sample_count(cls, v):
        """Sample counts must be even and at least 4."""
        if v < 4 or v % 2:
            raise ValueError("sample counts must be even integers >= 4")
        return v

    def make_grid(self) -> SpectralGrid:
        xmin, xmax, ymin, ymax = self.domain
        return SpectralGrid(xmin, xmax, ymin, ymax, self.nx, self.ny)

    def make_potential(self) -> Potential:
        if self.potential is PotentialKind.HARMONIC:
            scale = 0.5 if self.potential_scale is None else self.potential_scale
            return Potential.harmonic(scale)
        if self.potential is PotentialKind.GAUSSIAN_TRAP:
            scale = 1.0 if self.potential_scale is None else self.potential_scale
            return Potential.gaussian_trap(scale, self.trap_decay)
        if self.potential is PotentialKind.ZERO:
            return Potential.zero()
        raise ConfigError("custom potentials cannot be configured from a file")

    def make_nonlinearity(self) -> Nonlinearity:
        return Nonlinearity(self.lam, self.p)


class ModulationConfig(VortexConfig):
    """Configuration of a modulation run (``modulation run``)."""

    gamma0: float = 1.0
    tau: float = Field(0.025, gt=0)
    t_end: float = Field(0.8, ge=0)
    chi: ChiSpec = Field(default_factory=ChiSpec)
    dump_stride: int = Field(8, ge=1)
    output_dir: Optional[Path] = None
    refresh_tol: float = Field(1e-8, ge=0)
    det_tol: float = Field(1e-12, gt=0)
    w_bound_factor: float = Field(10.0, gt=1)
    snapshot_times: list[float] = Field(default_factory=list)


class ReferenceConfig(ModulationConfig):
    """Configuration of a direct split-step run (``reference run``)."""

    tau_ref_divisor: int = Field(32, ge=1)


class ExperimentSpec(BaseModel):
    """A named experiment plus config overrides."""

    model_config = ConfigDict(extra="forbid")

    name: ExperimentName
    overrides: dict[str, Any] = Field(default_factory=dict)


class Provenance(BaseModel):
    """Machine-readable record written into every experiment directory."""

    experiment: str
    config_hash: str
    config: dict[str, Any]
    versions: dict[str, str]
    threads: int
    snapshot_times: list[float] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


ConfigModel = TypeVar("ConfigModel", bound=BaseModel)


def _canonical(layer: Optional[dict[str, Any]]) -> dict[str, Any]:
    """Spell the interaction strength by its alias so later layers replace it."""
    data = dict(layer or {})
    if "lam" in data:
        data["lambda"] = data.pop("lam")
    return data


def read_mapping(path: Union[str, Path]) -> dict[str, Any]:
    """
    Parse a YAML file that must hold a single key-value mapping.

    Raises:
        ConfigError: If the file is unreadable or not a mapping
    """
    try:
        loaded = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    return loaded


def load_config(
    path: Optional[Union[str, Path]],
    model: type[ConfigModel],
    overrides: Optional[dict[str, Any]] = None,
    defaults: Optional[dict[str, Any]] = None,
) -> ConfigModel:
    """
    Read a flat YAML mapping and validate it against a config model.

    Args:
        path: Config file, or None for defaults only
        model: Pydantic model to validate against
        overrides: Keys applied on top of the file contents
        defaults: Keys the file contents override, e.g. an experiment preset

    Raises:
        ConfigError: If the file is unreadable, not a mapping, or invalid
    """
    data: dict[str, Any] = _canonical(defaults)
    if path is not None:
        data.update(_canonical(read_mapping(path)))
    data.update(_canonical(overrides))
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e
