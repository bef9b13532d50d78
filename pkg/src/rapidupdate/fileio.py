"""Plain-text persistence for grids, ensembles and observations.

Numbers are written with 12 significant digits and a ``.`` decimal separator.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .grid import ErrorSpec, GridSpec, ObservationSet

FLOAT_FMT = "{:.12g}"

_GRID_KEYS = ("nx", "ny", "nz", "dx", "dy", "dz", "x0", "y0", "z0")


class ParseError(ValueError):
    """Malformed input file. The message names the file and line."""

    def __init__(self, path, line: int | None, message: str):
        where = f"{path}" if line is None else f"{path}, line {line}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(x: float) -> str:
    return FLOAT_FMT.format(float(x))


def write_grid(path, grid: GridSpec) -> None:
    lines = [f"{key}={getattr(grid, key) if key[0] == 'n' else _fmt(getattr(grid, key))}"
             for key in _GRID_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path) -> GridSpec:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(path, lineno, f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _GRID_KEYS:
            raise ParseError(path, lineno, f"unknown grid key {key!r}")
        values[key] = value
    missing = [k for k in _GRID_KEYS[:6] if k not in values]
    if missing:
        raise ParseError(path, None, f"missing grid keys {missing}")
    try:
        kwargs = {k: (int(v) if k[0] == "n" else float(v)) for k, v in values.items()}
        return GridSpec(**kwargs)
    except ValueError as exc:
        raise ParseError(path, None, str(exc)) from exc


def _parse_float(path, lineno: int, cell: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(path, lineno, f"non-numeric cell {cell!r}") from None
    if not np.isfinite(value):
        raise ParseError(path, lineno, f"non-finite cell {cell!r}")
    return value


def _parse_int(path, lineno: int, cell: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise ParseError(path, lineno, f"non-integer cell {cell!r}") from None


def write_ensemble(path, values: np.ndarray, variable_names: list[str]) -> None:
    """Write an (n_real, n_blocks, n_vars) array, one row per (block, realisation)."""
    values = np.asarray(values, dtype=float)
    n_real, n_blocks, _ = values.shape
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["block_index", "realisation", *variable_names]) + "\n")
        for b in range(n_blocks):
            rows = values[:, b, :]
            for r in range(n_real):
                fh.write(f"{b},{r}," + ",".join(_fmt(x) for x in rows[r]) + "\n")


def read_ensemble(path) -> tuple[np.ndarray, list[str]]:
    """Read an ensemble CSV; rows may come in any order but must be complete."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if len(header) < 3 or header[:2] != ["block_index", "realisation"]:
            raise ParseError(path, 1, "header must start with block_index,realisation")
        names = header[2:]
        n_vars = len(names)
        blocks, reals, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_vars + 2:
                raise ParseError(path, lineno, f"expected {n_vars + 2} cells, got {len(row)}")
            blocks.append(_parse_int(path, lineno, row[0]))
            reals.append(_parse_int(path, lineno, row[1]))
            rows.append([_parse_float(path, lineno, c) for c in row[2:]])
    if not rows:
        raise ParseError(path, None, "no data rows")
    blocks_a = np.asarray(blocks)
    reals_a = np.asarray(reals)
    if blocks_a.min() < 0 or reals_a.min() < 0:
        raise ParseError(path, None, "negative block or realisation index")
    n_blocks = blocks_a.max() + 1
    n_real = reals_a.max() + 1
    if len(rows) != n_blocks * n_real:
        raise ParseError(
            path, None,
            f"row count {len(rows)} does not match {n_blocks} blocks x {n_real} realisations",
        )
    out = np.full((n_real, n_blocks, n_vars), np.nan)
    seen = np.zeros((n_real, n_blocks), dtype=bool)
    seen[reals_a, blocks_a] = True
    if not seen.all():
        raise ParseError(path, None, "duplicate (block_index, realisation) rows")
    out[reals_a, blocks_a, :] = np.asarray(rows)
    return out, names


def write_observations(path, obs_sets: ObservationSet | Iterable[ObservationSet]) -> None:
    if isinstance(obs_sets, ObservationSet):
        obs_sets = [obs_sets]
    obs_sets = list(obs_sets)
    names = obs_sets[0].variable_names
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["period", "block_index", *names]) + "\n")
        for obs in obs_sets:
            if obs.variable_names != names:
                raise ValueError("observation sets disagree on variable names")
            s = obs.sorted()
            for b, vals in zip(s.block_indices, s.values):
                fh.write(f"{obs.period},{b}," + ",".join(_fmt(x) for x in vals) + "\n")


def read_observations(
    path,
    variable_names: list[str] | None = None,
    error_spec: ErrorSpec | None = None,
) -> list[ObservationSet]:
    """Read an observation CSV into one sorted ObservationSet per period."""
    error_spec = error_spec or ErrorSpec()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if len(header) < 3 or header[:2] != ["period", "block_index"]:
            raise ParseError(path, 1, "header must start with period,block_index")
        names = header[2:]
        if variable_names is not None and names != list(variable_names):
            missing = [v for v in variable_names if v not in names]
            detail = f"missing variable columns {missing}" if missing else (
                f"variable columns {names} do not match {list(variable_names)}"
            )
            raise ParseError(path, 1, detail)
        by_period: dict[int, tuple[list[int], list[list[float]]]] = {}
        seen: dict[tuple[int, int], int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names) + 2:
                raise ParseError(path, lineno, f"expected {len(names) + 2} cells, got {len(row)}")
            period = _parse_int(path, lineno, row[0])
            block = _parse_int(path, lineno, row[1])
            if (period, block) in seen:
                raise ParseError(
                    path, lineno,
                    f"duplicate block {block} in period {period} (first on line {seen[period, block]})",
                )
            seen[period, block] = lineno
            blocks, vals = by_period.setdefault(period, ([], []))
            blocks.append(block)
            vals.append([_parse_float(path, lineno, c) for c in row[2:]])
    return [
        ObservationSet(p, np.asarray(b), np.asarray(v), names, error_spec).sorted()
        for p, (b, v) in sorted(by_period.items())
    ]
