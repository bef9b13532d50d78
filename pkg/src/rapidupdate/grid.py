"""Block grids, ensembles, observations and neighbourhood sub-models.

Linear block index order is k-major, then j, then i::

    index = i + nx * (j + ny * k)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridError(ValueError):
    """Raised for invalid grid geometry or out-of-range block references."""


class EmptySelectionError(ValueError):
    """Raised when an operation receives an empty block or observation list."""


class LinkError(ValueError):
    """Raised when a sub-model is written into a model it was not cut from."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    x0: float = 0.0
    y0: float = 0.0
    z0: float = 0.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise GridError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dx", "dy", "dz"):
            if not float(getattr(self, name)) > 0:
                raise GridError(f"{name} must be > 0, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_blocks(self) -> int:
        return self.nx * self.ny * self.nz

    def block_index(self, i, j, k):
        """Linear index of block (i, j, k). Accepts scalars or arrays."""
        i, j, k = (np.asarray(a) for a in (i, j, k))
        if (
            np.any(i < 0) or np.any(i >= self.nx)
            or np.any(j < 0) or np.any(j >= self.ny)
            or np.any(k < 0) or np.any(k >= self.nz)
        ):
            raise GridError(f"block coordinates out of range for grid {self.shape}")
        index = i + self.nx * (j + self.ny * k)
        return int(index) if index.ndim == 0 else index.astype(np.int64)

    def block_ijk(self, index):
        """Inverse of :meth:`block_index`."""
        index = np.asarray(index)
        self.check_indices(index)
        i = index % self.nx
        j = (index // self.nx) % self.ny
        k = index // (self.nx * self.ny)
        if index.ndim == 0:
            return int(i), int(j), int(k)
        return i.astype(np.int64), j.astype(np.int64), k.astype(np.int64)

    def check_indices(self, index) -> None:
        index = np.asarray(index)
        if index.size and (index.min() < 0 or index.max() >= self.n_blocks):
            raise GridError(
                f"block index out of range [0, {self.n_blocks}) for grid {self.shape}"
            )

    def centres(self, index=None) -> np.ndarray:
        """Block centre coordinates in metres, shape (n, 3)."""
        if index is None:
            index = np.arange(self.n_blocks)
        i, j, k = self.block_ijk(np.atleast_1d(index))
        return np.column_stack(
            [
                self.x0 + (i + 0.5) * self.dx,
                self.y0 + (j + 0.5) * self.dy,
                self.z0 + (k + 0.5) * self.dz,
            ]
        )

    def snap_to_block(self, xyz) -> np.ndarray:
        """Nearest block centre for each point; ties go to the lower index."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
        out = []
        for origin, size, n, col in zip(
            (self.x0, self.y0, self.z0), (self.dx, self.dy, self.dz), self.shape, xyz.T
        ):
            u = (col - origin) / size - 0.5
            # round half down so an exact tie lands on the lower block
            c = np.ceil(u - 0.5).astype(np.int64)
            out.append(np.clip(c, 0, n - 1))
        return self.block_index(*out)


@dataclass
class Ensemble:
    """Realisations of a multivariate block model.

    ``values`` has shape (n_real, n_blocks, n_vars) and may be modified in
    place through :func:`insert_submodel`.
    """

    values: np.ndarray
    variable_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("ensemble values must be (n_real, n_blocks, n_vars)")
        if self.values.shape[0] < 2:
            raise ValueError("an ensemble needs at least two realisations")
        if len(self.variable_names) != self.values.shape[2]:
            raise ValueError(
                f"{len(self.variable_names)} variable names for "
                f"{self.values.shape[2]} variables"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ensemble values must be finite")
        self.variable_names = list(self.variable_names)

    @property
    def n_real(self) -> int:
        return self.values.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.values.shape[1]

    @property
    def n_vars(self) -> int:
        return self.values.shape[2]

    def copy(self) -> "Ensemble":
        return Ensemble(self.values.copy(), list(self.variable_names))

    def etype(self) -> np.ndarray:
        """Per-block ensemble mean, shape (n_blocks, n_vars)."""
        return self.values.mean(axis=0)


@dataclass
class BlockModel:
    grid: GridSpec
    ensemble: Ensemble
    model_id: str = "model"

    def __post_init__(self):
        if self.ensemble.n_blocks != self.grid.n_blocks:
            raise ValueError(
                f"ensemble has {self.ensemble.n_blocks} blocks, grid has {self.grid.n_blocks}"
            )

    @property
    def variable_names(self) -> list[str]:
        return self.ensemble.variable_names

    def copy(self) -> "BlockModel":
        return BlockModel(self.grid, self.ensemble.copy(), self.model_id)


@dataclass(frozen=True)
class ErrorSpec:
    """Observation error: a relative fraction or absolute per-variable sds."""

    relative: float | None = 0.1
    absolute: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.relative is None) == (self.absolute is None):
            raise ValueError("give exactly one of relative or absolute error")
        if self.relative is not None and self.relative < 0:
            raise ValueError("relative error must be >= 0")
        if self.absolute is not None and any(s < 0 for s in self.absolute):
            raise ValueError("absolute error sds must be >= 0")


@dataclass
class ObservationSet:
    """Homotopic observations for one period, tied to block indices."""

    period: int
    block_indices: np.ndarray
    values: np.ndarray
    variable_names: list[str]
    error_spec: ErrorSpec = field(default_factory=ErrorSpec)

    def __post_init__(self):
        self.block_indices = np.asarray(self.block_indices, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1 and len(self.block_indices) == 0:
            self.values = self.values.reshape(0, len(self.variable_names))
        if self.values.shape != (len(self.block_indices), len(self.variable_names)):
            raise ValueError(
                f"observation values have shape {self.values.shape}, expected "
                f"({len(self.block_indices)}, {len(self.variable_names)})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"period {self.period}: observations must be finite")
        if len(np.unique(self.block_indices)) != len(self.block_indices):
            raise ValueError(f"period {self.period}: duplicate block index in observations")
        self.variable_names = list(self.variable_names)

    def __len__(self) -> int:
        return len(self.block_indices)

    def validate_for(self, grid: GridSpec) -> None:
        grid.check_indices(self.block_indices)

    def sorted(self) -> "ObservationSet":
        order = np.argsort(self.block_indices, kind="stable")
        return ObservationSet(
            self.period, self.block_indices[order], self.values[order],
            self.variable_names, self.error_spec,
        )


@dataclass
class SubModel:
    block_indices: np.ndarray
    ensemble: Ensemble
    parent_link: str

    def __post_init__(self):
        self.block_indices = np.asarray(self.block_indices, dtype=np.int64)
        if self.ensemble.n_blocks != len(self.block_indices):
            raise ValueError("sub-model ensemble and block index list differ in length")
        if len(self.block_indices) > 1 and np.any(np.diff(self.block_indices) <= 0):
            raise ValueError("sub-model block indices must be unique and sorted")


def block_index(grid: GridSpec, i, j, k):
    return grid.block_index(i, j, k)


def _normalise_selection(grid: GridSpec, block_indices: Sequence[int]) -> np.ndarray:
    idx = np.asarray(block_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise EmptySelectionError("empty block selection")
    grid.check_indices(idx)
    if len(np.unique(idx)) != len(idx):
        raise GridError("duplicate block indices in selection")
    return np.sort(idx)


def extract_submodel(model: BlockModel, block_indices: Sequence[int]) -> SubModel:
    idx = _normalise_selection(model.grid, block_indices)
    sub = Ensemble(model.ensemble.values[:, idx, :].copy(), model.variable_names)
    return SubModel(idx, sub, model.model_id)


def insert_submodel(model: BlockModel, sub: SubModel) -> BlockModel:
    """Write ``sub`` back into ``model`` in place and return ``model``."""
    if sub.parent_link != model.model_id:
        raise LinkError(
            f"sub-model belongs to {sub.parent_link!r}, not {model.model_id!r}"
        )
    model.grid.check_indices(sub.block_indices)
    if sub.ensemble.values.shape[0] != model.ensemble.n_real or (
        sub.ensemble.n_vars != model.ensemble.n_vars
    ):
        raise ValueError("sub-model ensemble shape does not match parent")
    model.ensemble.values[:, sub.block_indices, :] = sub.ensemble.values
    return model
