"""
Command-line entry point ``nlsmod``.

Subcommands:
    vortex solve | vortex residual FIELD | vortex derivatives FIELD
    modulation run
    reference run
    compare FIELD_A FIELD_B
    experiment NAME

Toolkit errors exit with status 1 and a one-line message on stderr.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import scipy.fft as sfft
from database import open_registry
from elliptic import build_bundle, phase_locked
from errors import GridMismatchError, NlsModError
from experiments import (
    RunRecorder,
    __version__,
    krylov_settings,
    run_experiment,
    run_modulation,
    run_reference,
    run_vortex_solve,
    write_provenance,
)
from fieldio import format_number, read_field, write_field, write_report
from models import RunKind
from reference import compare
from schemas import (
    ExperimentName,
    ExperimentSpec,
    ModulationConfig,
    ReferenceConfig,
    VortexConfig,
    load_config,
    read_mapping,
)
from spectral import inner, l2_norm
from vortex import problem_from_config, residual

logger = logging.getLogger(__name__)

DEFAULT_OUT = Path("runs")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the global flags on every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument(
        "--threads", type=int, default=1, help="FFT worker threads (default: 1)"
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: INFO)",
    )

    parser = argparse.ArgumentParser(
        prog="nlsmod",
        description="Vortex bound states and modulation dynamics of the 2-D NLS",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    vortex = sub.add_parser("vortex", help="Vortex bound states")
    vortex_sub = vortex.add_subparsers(dest="action", required=True)
    vortex_sub.add_parser("solve", parents=[common], help="Solve for phi_w")
    res = vortex_sub.add_parser(
        "residual", parents=[common], help="Stationary residual of a dumped field"
    )
    res.add_argument("field", type=Path)
    der = vortex_sub.add_parser(
        "derivatives", parents=[common], help="d phi/dw and d^2 phi/dw^2 of a vortex"
    )
    der.add_argument("field", type=Path)

    modulation = sub.add_parser("modulation", help="Modulation equations")
    modulation_sub = modulation.add_subparsers(dest="action", required=True)
    modulation_sub.add_parser("run", parents=[common], help="Integrate to t_end")

    reference = sub.add_parser("reference", help="Direct split-step solver")
    reference_sub = reference.add_subparsers(dest="action", required=True)
    reference_sub.add_parser("run", parents=[common], help="Propagate u0 to t_end")

    cmp = sub.add_parser("compare", parents=[common], help="Sup-norm of u_b - u_a")
    cmp.add_argument("field_a", type=Path)
    cmp.add_argument("field_b", type=Path)

    experiment = sub.add_parser(
        "experiment", parents=[common], help="Run a named experiment"
    )
    experiment.add_argument("name", choices=[e.value for e in ExperimentName])
    return parser


def _out_dir(args: argparse.Namespace, fallback: Optional[Path] = None) -> Path:
    if args.out is not None:
        return args.out
    if fallback is not None:
        return fallback
    parts = [args.command] + ([args.action] if getattr(args, "action", None) else [])
    return DEFAULT_OUT / "_".join(parts)


def cmd_vortex_solve(args: argparse.Namespace) -> int:
    config = load_config(args.config, VortexConfig)
    out_dir = _out_dir(args)
    write_provenance(out_dir, "vortex solve", config, args.threads)
    _, report, _ = run_vortex_solve(config, out_dir, open_registry(out_dir))
    print(f"n_tol = {report.n_tol}")
    print(f"residue_sup = {format_number(report.residue_sup)}")
    print(f"cauchy_sup = {format_number(report.cauchy_sup)}")
    return 0


def cmd_vortex_residual(args: argparse.Namespace) -> int:
    config = load_config(args.config, VortexConfig)
    phi = read_field(args.field)
    problem = problem_from_config(config)
    if phi.grid != problem.grid:
        raise GridMismatchError(f"{args.field} does not live on the configured grid")
    e_res = residual(phi, problem)
    print(f"residue_sup = {format_number(e_res.sup())}")
    if args.out is not None:
        write_field(args.out / "residual.nlsf", e_res)
    return 0


def cmd_vortex_derivatives(args: argparse.Namespace) -> int:
    config = load_config(args.config, VortexConfig)
    out_dir = _out_dir(args)
    phi = read_field(args.field)
    problem = problem_from_config(config)
    if phi.grid != problem.grid:
        raise GridMismatchError(f"{args.field} does not live on the configured grid")
    with RunRecorder(open_registry(out_dir), RunKind.DERIVATIVES, "derivatives", config):
        bundle = build_bundle(problem, phi, krylov_settings(config))
    write_field(out_dir / "dphi.nlsf", bundle.dphi)
    write_field(out_dir / "d2phi.nlsf", bundle.d2phi)
    orthogonality = abs(inner(phi, 1j * bundle.dphi)) / (
        l2_norm(phi) * l2_norm(bundle.dphi)
    )
    entries = {
        "dphi_residual": bundle.solve_residuals[0],
        "d2phi_residual": bundle.solve_residuals[1],
        "phase_locked": phase_locked(phi, bundle.dphi),
        "phi_idphi_orthogonality": orthogonality,
    }
    write_report(out_dir / "derivatives_report.txt", entries)
    for key, value in entries.items():
        print(f"{key} = {format_number(value) if isinstance(value, float) else value}")
    return 0


def cmd_modulation_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, ModulationConfig)
    out_dir = _out_dir(args, config.output_dir)
    snapshots = tuple(config.snapshot_times)
    write_provenance(out_dir, "modulation run", config, args.threads, snapshots)
    result = run_modulation(
        config, out_dir, open_registry(out_dir), snapshot_times=snapshots
    )
    final = result.history[-1]
    print(f"t = {format_number(final.t)}")
    print(f"w = {format_number(final.w)}")
    print(f"gamma = {format_number(final.gamma)}")
    print(f"r_sup = {format_number(final.r_sup)}")
    return 0


def cmd_reference_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, ReferenceConfig)
    out_dir = _out_dir(args, config.output_dir)
    write_provenance(out_dir, "reference run", config, args.threads)
    run = run_reference(config, out_dir, open_registry(out_dir))
    print(f"t = {format_number(run.t)}")
    print(f"steps = {run.steps}")
    print(f"mass = {format_number(run.mass())}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    e_u = compare(read_field(args.field_a), read_field(args.field_b))
    print(f"e_u = {format_number(e_u)}")
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    overrides = read_mapping(args.config) if args.config is not None else {}
    spec = ExperimentSpec(name=args.name, overrides=overrides)
    out_dir = _out_dir(args, DEFAULT_OUT / spec.name.value)
    run_experiment(spec, out_dir, args.threads)
    print(f"artifacts written to {out_dir}")
    return 0


COMMANDS = {
    ("vortex", "solve"): cmd_vortex_solve,
    ("vortex", "residual"): cmd_vortex_residual,
    ("vortex", "derivatives"): cmd_vortex_derivatives,
    ("modulation", "run"): cmd_modulation_run,
    ("reference", "run"): cmd_reference_run,
    ("compare", None): cmd_compare,
    ("experiment", None): cmd_experiment,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        with sfft.set_workers(args.threads):
            return handler(args)
    except NlsModError as e:
        if args.log_level == "DEBUG":
            logger.exception("command failed")
        print(f"nlsmod: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
