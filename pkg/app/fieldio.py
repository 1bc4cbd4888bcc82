"""
Field persistence: the NLSF binary dump, contour CSV export and key-value reports.

Binary layout (little endian):
    4s  magic  b"NLSF"
    u32 version (1)
    u32 nx
    u32 ny
    f64 xmin, xmax, ymin, ymax
followed by nx*ny interleaved f64 (re, im) pairs, row-major with y outer.
"""

import csv
import logging
import struct
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np
from errors import FieldFormatError
from spectral import ComplexField, SpectralGrid

logger = logging.getLogger(__name__)

MAGIC = b"NLSF"
VERSION = 1
HEADER = struct.Struct("<4sIII4d")

# arg(f) is undefined where |f| vanishes
ARG_MASK_THRESHOLD = 1e-8

PathLike = Union[str, Path]


def write_field(path: PathLike, field: ComplexField) -> Path:
    """Write a field in the NLSF binary format and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = field.grid
    header = HEADER.pack(
        MAGIC, VERSION, grid.nx, grid.ny, grid.xmin, grid.xmax, grid.ymin, grid.ymax
    )
    payload = np.ascontiguousarray(field.values, dtype="<c16").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    logger.debug("wrote field %s (%dx%d)", path, grid.ny, grid.nx)
    return path


def read_field(path: PathLike) -> ComplexField:
    """Read an NLSF dump back into a ComplexField."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise FieldFormatError(f"{path}: file shorter than the NLSF header")
    magic, version, nx, ny, xmin, xmax, ymin, ymax = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    expected = HEADER.size + 16 * nx * ny
    if len(data) != expected:
        raise FieldFormatError(
            f"{path}: expected {expected} bytes for {nx}x{ny}, found {len(data)}"
        )
    try:
        grid = SpectralGrid(xmin, xmax, ymin, ymax, nx, ny)
    except ValueError as e:
        raise FieldFormatError(f"{path}: invalid grid header: {e}") from e
    values = np.frombuffer(data, dtype="<c16", offset=HEADER.size).reshape(ny, nx)
    return ComplexField(grid, values)


def format_number(value: float) -> str:
    return f"{value:.17g}"


def write_contour_csv(field: ComplexField, prefix: PathLike) -> tuple[Path, Path]:
    """
    Export |f| and arg(f) as two long-format CSVs (x, y, value).

    The argument column is left empty where |f| < ARG_MASK_THRESHOLD.

    Returns:
        Paths of the modulus and argument files
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    modulus_path = prefix.with_name(prefix.name + "_abs.csv")
    argument_path = prefix.with_name(prefix.name + "_arg.csv")

    grid = field.grid
    modulus = field.modulus()
    argument = np.angle(field.values)

    with open(modulus_path, "w", newline="") as fm, open(
        argument_path, "w", newline=""
    ) as fa:
        mod_writer = csv.writer(fm)
        arg_writer = csv.writer(fa)
        mod_writer.writerow(["x", "y", "abs"])
        arg_writer.writerow(["x", "y", "arg"])
        for iy, y in enumerate(grid.y):
            for ix, x in enumerate(grid.x):
                mod_writer.writerow(
                    [format_number(x), format_number(y), format_number(modulus[iy, ix])]
                )
                arg = (
                    format_number(argument[iy, ix])
                    if modulus[iy, ix] >= ARG_MASK_THRESHOLD
                    else ""
                )
                arg_writer.writerow([format_number(x), format_number(y), arg])
    return modulus_path, argument_path


def write_report(path: PathLike, entries: Mapping[str, Any]) -> Path:
    """Write ``key = value`` lines in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = format_number(value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path: PathLike) -> dict[str, str]:
    """Parse a ``key = value`` report; values are returned as strings."""
    entries = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries
