"""
End-to-end runs: the pipelines behind the CLI subcommands and the named
experiments, plus the table, contour and provenance writers they share.

Every run directory gets a config snapshot, a provenance record and a run
registry; CSV outputs contain no timestamps so that repeated runs with the
same config and thread count reproduce them byte for byte.
"""

import csv
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import (
    Any,
    Callable,
    Iterable,
    Iterator,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Union,
)

import numpy as np
import scipy.fft as sfft
import yaml
from database import open_registry, session_factory
from elliptic import KrylovSettings, VortexBundle, build_bundle
from errors import ExperimentStageError, NlsModError, NonConvergenceError
from fieldio import (
    format_number,
    read_field,
    write_contour_csv,
    write_field,
    write_report,
)
from models import IterationRecord, Run, RunKind, RunStatus, StepRecord
from modulation import (
    ModulationIntegrator,
    ModulationRun,
    ModulationState,
    project_initial_radiation,
    reconstruct_u,
)
from pydantic import BaseModel
from reference import ReferenceRun, compare, propagate
from schemas import (
    ExperimentName,
    ExperimentSpec,
    ModulationConfig,
    Provenance,
    ReferenceConfig,
    StepDiagnostics,
    VortexConfig,
    VortexSolveReport,
    load_config,
)
from spectral import ComplexField, l2_norm, radial_gaussian
from sqlalchemy.engine import Engine
from vortex import (
    VortexProblem,
    core_ratio,
    phase_winding,
    problem_from_config,
    ring_radius,
    solve_vortex,
    solve_vortex_family,
    step3_identity_defect,
)

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

DEFAULT_SNAPSHOT_TIMES = (0.4, 0.8, 1.6, 3.2)
VERSIONED_PACKAGES = ("numpy", "scipy", "pydantic", "SQLAlchemy", "PyYAML")
SWEEP_KEY = "sweep"
LOG_COLUMNS = tuple(StepDiagnostics.model_fields)
ITERATION_COLUMNS = ("iteration", "residue_sup", "cauchy_sup")

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_number(float(value))
    if value is None:
        return ""
    return str(value)


def emit_table(
    rows: Iterable[Mapping[str, Any]], path: PathLike, columns: Sequence[str]
) -> Path:
    """
    Write rows as CSV with a fixed column order; missing cells stay empty.

    An empty row iterable produces a header-only file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(column)) for column in columns])
    return path


def emit_run_log(history: Sequence[StepDiagnostics], path: PathLike) -> Path:
    """Modulation run log: one row per time level."""
    return emit_table((d.model_dump() for d in history), path, LOG_COLUMNS)


def emit_iterations(report: VortexSolveReport, path: PathLike) -> Path:
    return emit_table(
        (stat.model_dump() for stat in report.history), path, ITERATION_COLUMNS
    )


def emit_contour(
    source: Union[ComplexField, PathLike], prefix: PathLike
) -> tuple[Path, Path]:
    """Modulus and argument CSVs of a field or of an NLSF dump."""
    field_ = source if isinstance(source, ComplexField) else read_field(source)
    return write_contour_csv(field_, prefix)


def config_fingerprint(config: BaseModel) -> tuple[str, dict[str, Any]]:
    """sha256 of the canonical JSON form of a config, and that form."""
    canonical = config.model_dump(mode="json", by_alias=True)
    text = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest(), canonical


def package_versions() -> dict[str, str]:
    versions = {"nlsmod": __version__}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_provenance(
    out_dir: PathLike,
    experiment: str,
    config: BaseModel,
    threads: int,
    snapshot_times: Sequence[float] = (),
) -> Path:
    """Write config.yaml and provenance.json into a run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest, canonical = config_fingerprint(config)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(canonical, sort_keys=True))
    provenance = Provenance(
        experiment=experiment,
        config_hash=digest,
        config=canonical,
        versions=package_versions(),
        threads=threads,
        snapshot_times=list(snapshot_times),
    )
    path = out_dir / "provenance.json"
    path.write_text(provenance.model_dump_json(indent=2))
    return path


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Name the experiment stage in any toolkit or I/O error raised inside it."""
    logger.info("stage %s", name)
    try:
        yield
    except ExperimentStageError:
        raise
    except (NlsModError, OSError) as e:
        raise ExperimentStageError(name, e) from e


# ---------------------------------------------------------------------------
# Run registry
# ---------------------------------------------------------------------------


class RunRecorder:
    """
    Context manager that keeps one registry Run row up to date.

    Without an engine every method is a no-op. On exit the run is marked
    completed, or failed with the exception message; the exception propagates.
    """

    def __init__(
        self, engine: Optional[Engine], kind: RunKind, name: str, config: BaseModel
    ):
        self.engine = engine
        self.kind = kind
        self.name = name
        self.config = config
        self.session = None
        self.run: Optional[Run] = None

    def __enter__(self) -> "RunRecorder":
        if self.engine is None:
            return self
        digest, canonical = config_fingerprint(self.config)
        self.session = session_factory(self.engine)()
        self.run = Run(
            kind=self.kind,
            name=self.name,
            config_hash=digest,
            config_json=json.dumps(canonical, sort_keys=True),
            status=RunStatus.RUNNING,
        )
        self.session.add(self.run)
        self.session.commit()
        return self

    def record_iterations(self, report: VortexSolveReport) -> None:
        if self.session is None:
            return
        for stat in report.history:
            self.session.add(
                IterationRecord(
                    run_id=self.run.id,
                    iteration=stat.iteration,
                    residue_sup=stat.residue_sup,
                    cauchy_sup=stat.cauchy_sup,
                )
            )

    def record_step(self, diagnostics: StepDiagnostics) -> None:
        if self.session is None:
            return
        self.session.add(StepRecord(run_id=self.run.id, **diagnostics.model_dump()))

    def __exit__(self, exc_type, exc, tb) -> bool:
        if self.session is None:
            return False
        try:
            self.run.status = RunStatus.COMPLETED if exc is None else RunStatus.FAILED
            self.run.message = None if exc is None else str(exc)
            self.run.finished_at = datetime.now(timezone.utc)
            self.session.commit()
        finally:
            self.session.close()
        return False


# ---------------------------------------------------------------------------
# Pipelines shared by the CLI and the experiments
# ---------------------------------------------------------------------------


def krylov_settings(config: VortexConfig) -> KrylovSettings:
    return KrylovSettings(
        tol=config.krylov_tol,
        restart=config.krylov_restart,
        max_iters=config.krylov_max_iters,
    )


def vortex_summary(
    phi: ComplexField, report: VortexSolveReport, problem: VortexProblem
) -> dict[str, Any]:
    """Key-value report of a converged vortex."""
    return {
        "m": problem.m,
        "w": problem.w,
        "n_tol": report.n_tol,
        "residue_sup": report.residue_sup,
        "cauchy_sup": report.cauchy_sup,
        "converged": report.converged,
        "inconsistent_branch": report.inconsistent_branch,
        "winding": phase_winding(phi) / (2.0 * math.pi),
        "ring_radius": ring_radius(phi),
        "core_ratio": core_ratio(phi),
        "step3_defect": step3_identity_defect(phi, problem),
        "l2_norm": l2_norm(phi),
    }


def run_vortex_solve(
    config: VortexConfig,
    out_dir: Optional[PathLike],
    engine: Optional[Engine],
    name: str = "vortex",
) -> tuple[ComplexField, VortexSolveReport, VortexProblem]:
    """
    Solve one vortex and record its iteration history.

    With an output directory the vortex is dumped as <name>.nlsf together with
    its contour CSVs, iteration CSV and summary report.
    """
    problem = problem_from_config(config)
    prior = read_field(config.prior_path) if config.prior_path else None
    with RunRecorder(engine, RunKind.VORTEX, name, config) as recorder:
        try:
            phi, report = solve_vortex(problem, prior=prior)
        except NonConvergenceError as e:
            if isinstance(e.report, VortexSolveReport):
                recorder.record_iterations(e.report)
            raise
        recorder.record_iterations(report)

    if out_dir is not None:
        out_dir = Path(out_dir)
        emit_contour(write_field(out_dir / f"{name}.nlsf", phi), out_dir / name)
        emit_iterations(report, out_dir / f"{name}_iterations.csv")
        write_report(out_dir / f"{name}_report.txt", vortex_summary(phi, report, problem))
    return phi, report, problem


class PreparedModulation(NamedTuple):
    """Vortex bundle at w0 and the t = 0 state built on it."""

    bundle: VortexBundle
    state0: ModulationState


def prepare_modulation(
    config: ModulationConfig,
    out_dir: Optional[PathLike],
    engine: Optional[Engine],
) -> PreparedModulation:
    """Solve the vortex at w0, its w-derivatives and the projected R0."""
    phi, _, problem = run_vortex_solve(config, out_dir, engine, "vortex")
    with RunRecorder(engine, RunKind.DERIVATIVES, "derivatives", config):
        bundle = build_bundle(problem, phi, krylov_settings(config))
    chi = radial_gaussian(problem.grid, config.chi.amplitude, config.chi.width)
    R0 = project_initial_radiation(chi, bundle)
    state0 = ModulationState(n=0, t=0.0, w=bundle.w, gamma=config.gamma0, R=R0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_field(out_dir / "dphi.nlsf", bundle.dphi)
        write_field(out_dir / "d2phi.nlsf", bundle.d2phi)
        write_field(out_dir / "R0.nlsf", R0)
    return PreparedModulation(bundle, state0)


def snapshot_times_for(config: ModulationConfig) -> tuple[float, ...]:
    """Configured snapshot times, or the defaults that fall inside [0, t_end]."""
    times = config.snapshot_times or DEFAULT_SNAPSHOT_TIMES
    return tuple(t for t in times if 0.0 <= t <= config.t_end + 1e-12)


@dataclass
class DumpWriter:
    """Writes R and u dumps every `stride` steps and at the snapshot times."""

    out_dir: Optional[Path]
    name: str
    stride: int
    tau: float
    snapshot_times: Sequence[float] = ()
    written: list[Path] = field(default_factory=list)

    def __post_init__(self):
        self._snapshots = {int(round(t / self.tau)): t for t in self.snapshot_times}

    def __call__(
        self, state: ModulationState, bundle: VortexBundle, diagnostics: StepDiagnostics
    ) -> None:
        if self.out_dir is None:
            return
        if state.n % self.stride == 0:
            dumps = self.out_dir / "dumps"
            self.written.append(
                write_field(dumps / f"{self.name}_R_{state.n:06d}.nlsf", state.R)
            )
            self.written.append(
                write_field(
                    dumps / f"{self.name}_u_{state.n:06d}.nlsf",
                    reconstruct_u(state, bundle),
                )
            )
            logger.info(
                "dumped step %d (t=%.4g, ||R||_sup=%.3e)",
                state.n,
                state.t,
                diagnostics.r_sup,
            )
        if state.n in self._snapshots:
            label = f"t{self._snapshots[state.n]:g}"
            snapshots = self.out_dir / "snapshots"
            u = reconstruct_u(state, bundle)
            for kind, snapshot in (("R", state.R), ("u", u)):
                prefix = snapshots / f"{self.name}_{kind}_{label}"
                dump = write_field(prefix.with_name(prefix.name + ".nlsf"), snapshot)
                self.written.append(dump)
                emit_contour(dump, prefix)


def run_modulation(
    config: ModulationConfig,
    out_dir: Optional[PathLike],
    engine: Optional[Engine],
    name: str = "modulation",
    snapshot_times: Sequence[float] = (),
    prepared: Optional[PreparedModulation] = None,
) -> ModulationRun:
    """
    Integrate the modulation equations to t_end.

    Writes <name>_log.csv, the stride and snapshot dumps, and <name>_u_final.nlsf.
    """
    if prepared is None:
        prepared = prepare_modulation(config, out_dir, engine)
    out_path = Path(out_dir) if out_dir is not None else None
    integrator = ModulationIntegrator(
        prepared.bundle,
        config.tau,
        refresh_tol=config.refresh_tol,
        det_tol=config.det_tol,
        w_bound_factor=config.w_bound_factor,
        krylov=krylov_settings(config),
    )
    writer = DumpWriter(out_path, name, config.dump_stride, config.tau, snapshot_times)

    with RunRecorder(engine, RunKind.MODULATION, name, config) as recorder:

        def on_step(state, bundle, diagnostics):
            recorder.record_step(diagnostics)
            writer(state, bundle, diagnostics)

        result = integrator.run(prepared.state0, config.t_end, on_step)

    if out_path is not None:
        emit_run_log(result.history, out_path / f"{name}_log.csv")
        write_field(
            out_path / f"{name}_u_final.nlsf", reconstruct_u(result.final, result.bundle)
        )
    return result


def run_reference(
    config: ReferenceConfig,
    out_dir: Optional[PathLike],
    engine: Optional[Engine],
    u0: Optional[ComplexField] = None,
    tau_ref: Optional[float] = None,
    name: str = "reference",
) -> ReferenceRun:
    """
    Split-step run from u0 to t_end.

    Without u0 the initial condition is the reconstructed modulation state
    e^{i gamma0} (phi_w0 + R0); tau_ref defaults to tau / tau_ref_divisor.
    """
    if u0 is None:
        prepared = prepare_modulation(config, out_dir, engine)
        u0 = reconstruct_u(prepared.state0, prepared.bundle)
    if tau_ref is None:
        tau_ref = config.tau / config.tau_ref_divisor
    run = ReferenceRun.start(
        u0, config.make_potential(), config.make_nonlinearity(), tau_ref
    )
    with RunRecorder(engine, RunKind.REFERENCE, name, config):
        run = propagate(run, config.t_end)
    if out_dir is not None:
        write_field(Path(out_dir) / f"{name}_u.nlsf", run.u)
    return run


# ---------------------------------------------------------------------------
# Named experiments
# ---------------------------------------------------------------------------

EG1 = {
    "domain": 8.0,
    "nx": 128,
    "ny": 128,
    "potential": "harmonic",
    "potential_scale": 0.5,
    "lambda": -0.5,
    "w": 1.1,
    "m": 1,
}
EG2 = {
    "domain": 12.0,
    "nx": 128,
    "ny": 128,
    "potential": "zero",
    "lambda": -2.0,
    "w": -0.5,
    "m": 1,
}
# The epsilon tables take one pseudo-time step of the flow per outer iteration
TABLE_FLOW = {"flow_steps": 1, "pseudo_dt": 0.01}


@dataclass(frozen=True)
class ExperimentPreset:
    """
    Parameter set bound to an experiment name.

    Attributes:
        model: Config model the overrides are validated against
        defaults: Preset config keys
        sweep: Epsilon or tau values of the convergence table, if any
    """

    model: type[VortexConfig]
    defaults: dict[str, Any]
    sweep: tuple[float, ...] = ()


PRESETS: dict[ExperimentName, ExperimentPreset] = {
    ExperimentName.EG1_VORTEX: ExperimentPreset(
        VortexConfig, {**EG1, **TABLE_FLOW}, sweep=(0.1, 0.05, 0.01, 0.005)
    ),
    ExperimentName.EG2_VORTEX: ExperimentPreset(
        VortexConfig, {**EG2, **TABLE_FLOW}, sweep=(0.1, 0.05, 0.025, 0.0125)
    ),
    ExperimentName.TABLE3_CONVERGENCE: ExperimentPreset(
        ReferenceConfig,
        {**EG1, "gamma0": 1.0, "chi": {"amplitude": 0.25, "width": 1.0}, "t_end": 0.8},
        sweep=(0.2, 0.1, 0.05, 0.025),
    ),
    ExperimentName.SCATTERING_FREE: ExperimentPreset(
        ModulationConfig,
        {**EG2, "gamma0": 1.0, "chi": {"amplitude": 0.1, "width": 1.0}, "t_end": 3.2},
    ),
    ExperimentName.TUNNELLING: ExperimentPreset(
        ModulationConfig,
        {
            "domain": 12.0,
            "nx": 256,
            "ny": 256,
            "potential": "gaussian_trap",
            "potential_scale": 1.0,
            "trap_decay": math.sqrt(2.0),
            "lambda": -1.5,
            "w": -0.5,
            "m": 1,
            "gamma0": 1.0,
            "chi": {"amplitude": 0.1, "width": 4.0},
            "t_end": 3.2,
        },
    ),
}


def experiment_config(spec: ExperimentSpec) -> tuple[VortexConfig, tuple[float, ...]]:
    """
    Preset config with the spec's overrides applied, and the sweep values.

    The overrides may replace the sweep under the key ``sweep``.
    """
    preset = PRESETS[spec.name]
    overrides = dict(spec.overrides)
    sweep = tuple(float(v) for v in overrides.pop(SWEEP_KEY, preset.sweep))
    config = load_config(None, preset.model, overrides, defaults=preset.defaults)
    return config, sweep


def _sweep_columns(sweep: Sequence[float]) -> list[str]:
    return [f"{value:g}" for value in sweep]


def _vortex_table(
    config: VortexConfig,
    sweep: Sequence[float],
    out_dir: Path,
    engine: Optional[Engine],
    table_name: str,
) -> None:
    """Residue and Cauchy error plus iteration count for each epsilon, then m = 1, 2, 3."""
    columns = _sweep_columns(sweep)
    e_res = {"quantity": "e_res"}
    e_c = {"quantity": "e_c"}
    n_tol = {"quantity": "n_tol"}
    with stage("table"):
        for epsilon, column in zip(sweep, columns):
            eps_config = config.model_copy(update={"epsilon": epsilon})
            _, report, _ = run_vortex_solve(
                eps_config, None, engine, name=f"vortex_eps{column}"
            )
            e_res[column] = report.residue_sup
            e_c[column] = report.cauchy_sup
            n_tol[column] = report.n_tol
        emit_table(
            [e_res, e_c, n_tol], out_dir / f"{table_name}.csv", ["quantity", *columns]
        )

    finest = min(sweep) if sweep else config.epsilon
    with stage("family"):
        problem = problem_from_config(
            config.model_copy(update={"epsilon": finest, "flow_steps": None})
        )
        for m, (phi, report) in solve_vortex_family(problem).items():
            label = f"phi_m{m}"
            emit_contour(write_field(out_dir / f"{label}.nlsf", phi), out_dir / label)
            summary = vortex_summary(phi, report, replace(problem, m=m))
            write_report(out_dir / f"{label}_report.txt", summary)


def _eg1_vortex(config, sweep, out_dir, engine) -> None:
    _vortex_table(config, sweep, out_dir, engine, "table1")


def _eg2_vortex(config, sweep, out_dir, engine) -> None:
    _vortex_table(config, sweep, out_dir, engine, "table2")


def observed_orders(errors: Sequence[float], ratio: float = 2.0) -> list[Optional[float]]:
    """log_ratio(e_k / e_{k+1}) for consecutive entries of a refinement sweep."""
    orders: list[Optional[float]] = [None]
    for coarse, fine in zip(errors, errors[1:]):
        if coarse > 0 and fine > 0:
            orders.append(math.log(coarse / fine) / math.log(ratio))
        else:
            orders.append(None)
    return orders


def _table3_convergence(config, sweep, out_dir, engine) -> None:
    """e_u = ||u_ref(t_end) - u^n||_inf for each tau against one fine reference run."""
    with stage("vortex"):
        prepared = prepare_modulation(config, out_dir, engine)
    u0 = reconstruct_u(prepared.state0, prepared.bundle)
    with stage("reference"):
        tau_ref = min(sweep) / config.tau_ref_divisor
        reference = run_reference(config, out_dir, engine, u0=u0, tau_ref=tau_ref)

    columns = _sweep_columns(sweep)
    errors = []
    with stage("modulation"):
        for tau, column in zip(sweep, columns):
            tau_config = config.model_copy(update={"tau": tau})
            result = run_modulation(
                tau_config,
                out_dir,
                engine,
                name=f"modulation_tau{column}",
                prepared=prepared,
            )
            u_mod = reconstruct_u(result.final, result.bundle)
            errors.append(compare(u_mod, reference.u))
            logger.info("tau=%s: e_u=%.3e", column, errors[-1])
    if any(b >= a for a, b in zip(errors, errors[1:])):
        logger.warning("e_u is not strictly decreasing in tau: %s", errors)

    ratio = sweep[0] / sweep[1] if len(sweep) > 1 else 2.0
    e_u = {"quantity": "e_u", **dict(zip(columns, errors))}
    order = {"quantity": "order", **dict(zip(columns, observed_orders(errors, ratio)))}
    emit_table([e_u, order], out_dir / "table3.csv", ["quantity", *columns])


def _radiation_run(config, sweep, out_dir, engine) -> None:
    """Setup contours, then a modulation run with snapshots at the configured times."""
    with stage("vortex"):
        prepared = prepare_modulation(config, out_dir, engine)
    with stage("initial"):
        grid = prepared.bundle.phi.grid
        emit_contour(prepared.bundle.phi, out_dir / "phi0")
        emit_contour(prepared.state0.R, out_dir / "R0")
        potential = prepared.bundle.potential_values
        if np.any(potential):
            emit_contour(grid.field(potential), out_dir / "potential")
    with stage("modulation"):
        run_modulation(
            config,
            out_dir,
            engine,
            snapshot_times=snapshot_times_for(config),
            prepared=prepared,
        )


Runner = Callable[[VortexConfig, Sequence[float], Path, Optional[Engine]], None]

RUNNERS: dict[ExperimentName, Runner] = {
    ExperimentName.EG1_VORTEX: _eg1_vortex,
    ExperimentName.EG2_VORTEX: _eg2_vortex,
    ExperimentName.TABLE3_CONVERGENCE: _table3_convergence,
    ExperimentName.SCATTERING_FREE: _radiation_run,
    ExperimentName.TUNNELLING: _radiation_run,
}


def run_experiment(spec: ExperimentSpec, out_dir: PathLike, threads: int = 1) -> Path:
    """
    Run a named experiment into out_dir and return the directory.

    Raises:
        ConfigError: If the overrides do not validate
        ExperimentStageError: If any stage fails
    """
    out_dir = Path(out_dir)
    config, sweep = experiment_config(spec)
    snapshots = (
        snapshot_times_for(config) if isinstance(config, ModulationConfig) else ()
    )
    write_provenance(out_dir, spec.name.value, config, threads, snapshots)
    engine = open_registry(out_dir)
    logger.info("experiment %s -> %s", spec.name.value, out_dir)
    with sfft.set_workers(threads):
        with RunRecorder(engine, RunKind.EXPERIMENT, spec.name.value, config):
            RUNNERS[spec.name](config, sweep, out_dir, engine)
    return out_dir
