"""Rotation-based iterative Gaussianisation (RBIG).

Each iteration maps every column to normal scores through its empirical
CDF and then applies a PCA rotation. The per-iteration maps and rotations
are kept in an :class:`RbigChain`, which is replayed forwards to transform
new rows and backwards to return to the original units.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

MAGIC = "RBIGCHAIN v1"

# slope floor for tail extrapolation, as a fraction of the IQR-based slope
TAIL_SLOPE_FLOOR = 0.1
_IQR_SCORE_WIDTH = 2.0 * ndtri(0.75)
# magnitudes below this are flushed to zero so anchor spacings stay far from
# subnormal, where interpolation slopes overflow
FLUSH_TO_ZERO = 1e-280
# distinct values closer than this fraction of the column magnitude share an anchor
ANCHOR_RESOLUTION = 1e-12


def _flush(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < FLUSH_TO_ZERO, 0.0, x)


class DegenerateError(ValueError):
    """A column has (numerically) a single distinct value."""


class SchemaError(ValueError):
    pass


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def despike_order(column: np.ndarray, variable: int = 0) -> np.ndarray:
    """Sort order of ``column`` with ties broken by a hash of (row, variable)."""
    rows = np.arange(len(column), dtype=np.uint64)
    with np.errstate(over="ignore"):
        jitter = _splitmix64(rows * np.uint64(0x100000001B3) + np.uint64(variable))
    return np.lexsort((jitter, column))


@dataclass(frozen=True)
class MarginalMap:
    """Monotone piecewise-linear map between data values and normal scores.

    ``values`` are the distinct training values and ``scores`` the mean normal
    score of each; both strictly increase. Outside the anchors the map is
    extended linearly with ``lower_slope``/``upper_slope`` (data units per
    score unit).
    """

    values: np.ndarray
    scores: np.ndarray
    lower_slope: float
    upper_slope: float

    def forward(self, x) -> np.ndarray:
        x = _flush(np.asarray(x, dtype=float))
        v, s = self.values, self.scores
        y = np.interp(x, v, s)
        lo, hi = x < v[0], x > v[-1]
        y[lo] = s[0] + (x[lo] - v[0]) / self.lower_slope
        y[hi] = s[-1] + (x[hi] - v[-1]) / self.upper_slope
        return y

    def inverse(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        v, s = self.values, self.scores
        x = np.interp(y, s, v)
        lo, hi = y < s[0], y > s[-1]
        x[lo] = v[0] + (y[lo] - s[0]) * self.lower_slope
        x[hi] = v[-1] + (y[hi] - s[-1]) * self.upper_slope
        return x

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "scores": self.scores.tolist(),
            "lower_slope": self.lower_slope,
            "upper_slope": self.upper_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalMap":
        return cls(
            np.asarray(d["values"], dtype=float),
            np.asarray(d["scores"], dtype=float),
            float(d["lower_slope"]),
            float(d["upper_slope"]),
        )


def _fit_map(x: np.ndarray, order: np.ndarray) -> tuple[MarginalMap, np.ndarray, np.ndarray]:
    """Map from a sort order of ``x``; also returns the plotting-position
    scores in sorted order and each row's anchor score."""
    n = len(x)
    sorted_x = x[order]
    grid_scores = ndtri((np.arange(1, n + 1) - 0.5) / n)
    # values closer than this are one tie group; anchors a few ulps apart
    # would give near-infinite slopes
    tol = ANCHOR_RESOLUTION * np.abs(sorted_x[[0, -1]]).max()
    new_group = np.r_[True, np.diff(sorted_x) > tol]
    starts = np.flatnonzero(new_group)
    if len(starts) < 2:
        raise DegenerateError("column is constant")
    values = sorted_x[starts]
    counts = np.diff(np.r_[starts, n])
    anchor_scores = np.add.reduceat(grid_scores, starts) / counts
    group = np.cumsum(new_group) - 1

    q25, q75 = np.interp([0.25 * (n - 1), 0.75 * (n - 1)], np.arange(n), sorted_x)
    floor = TAIL_SLOPE_FLOOR * (q75 - q25) / _IQR_SCORE_WIDTH
    if floor <= 0:
        floor = TAIL_SLOPE_FLOOR * (values[-1] - values[0]) / (anchor_scores[-1] - anchor_scores[0])
    lower = (values[1] - values[0]) / (anchor_scores[1] - anchor_scores[0])
    upper = (values[-1] - values[-2]) / (anchor_scores[-1] - anchor_scores[-2])
    mmap = MarginalMap(values, anchor_scores, max(lower, floor), max(upper, floor))
    sorted_scores = anchor_scores[group]
    off = sorted_x != values[group]
    if off.any():
        sorted_scores[off] = mmap.forward(sorted_x[off])
    row_scores = np.empty(n)
    row_scores[order] = sorted_scores
    return mmap, grid_scores, row_scores


def _check_column(column) -> np.ndarray:
    x = np.asarray(column, dtype=float)
    if len(x) < 2:
        raise ValueError(f"need at least 2 values, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("column contains non-finite values")
    return _flush(x)


def marginal_gaussianise(column, variable: int = 0) -> tuple[np.ndarray, MarginalMap]:
    """Normal scores of ``column`` and the map that produced them.

    Scores are ``ndtri((rank - 0.5) / n)`` with 1-based ranks; tied values get
    distinct ranks from :func:`despike_order`. The returned map sends each
    distinct value to the mean score of its tie group.
    """
    x = _check_column(column)
    order = despike_order(x, variable)
    mmap, grid_scores, _ = _fit_map(x, order)
    scores = np.empty(len(x))
    scores[order] = grid_scores
    return scores, mmap


@dataclass(frozen=True)
class RotationMatrix:
    """Orthonormal rotation; rows are principal axes (descending variance)."""

    matrix: np.ndarray
    eigenvalues: np.ndarray
    rank_deficient: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return _rowwise_product(x, self.matrix.T)

    def invert(self, y: np.ndarray) -> np.ndarray:
        return _rowwise_product(y, self.matrix)


def _rowwise_product(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    # x @ m accumulated column by column: each output row depends only on its
    # input row, whatever the number of rows (BLAS blocking does not).
    out = x[:, :1] * m[0]
    for k in range(1, m.shape[0]):
        out += x[:, k:k + 1] * m[k]
    return out


def pca_rotation(data) -> RotationMatrix:
    """PCA rotation of the column covariance of ``data`` (n_rows x n_vars).

    Eigenvectors are sign-normalised so their largest-magnitude component is
    positive; equal eigenvalues keep the original variable order.
    """
    data = np.asarray(data, dtype=float)
    n, p = data.shape
    if n <= p:
        raise ValueError(f"need more rows than variables, got {n} x {p}")
    cov = np.cov(data, rowvar=False).reshape(p, p)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    rows = evecs.T.copy()
    lead = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(p), lead])
    rows *= signs[:, None]
    tol = max(abs(evals[0]), 1.0) * p * np.finfo(float).eps * 10
    return RotationMatrix(rows, evals, bool(np.any(evals <= tol)))


def negentropy_proxy(data) -> float:
    """Sum over columns of |skewness| + |excess kurtosis| / 4."""
    data = np.asarray(data, dtype=float)
    z = (data - data.mean(axis=0)) / data.std(axis=0)
    z2 = z * z
    skew = np.mean(z2 * z, axis=0)
    kurt = np.mean(z2 * z2, axis=0) - 3.0
    return float(np.sum(np.abs(skew) + np.abs(kurt) / 4.0))


@dataclass(frozen=True)
class RbigStage:
    maps: tuple[MarginalMap, ...]
    rotation: RotationMatrix


@dataclass
class RbigChain:
    stages: list[RbigStage]
    variable_names: list[str]
    n_rows: int
    proxy_history: list[float] = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.stages)

    @property
    def n_vars(self) -> int:
        return len(self.variable_names)

    @property
    def rank_deficient_iterations(self) -> list[int]:
        return [i for i, st in enumerate(self.stages) if st.rotation.rank_deficient]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_vars:
            raise ValueError(f"expected (n, {self.n_vars}) array, got {x.shape}")
        return x

    def forward(self, data) -> np.ndarray:
        x = self._check(data)
        for stage in self.stages:
            y = np.column_stack([m.forward(x[:, v]) for v, m in enumerate(stage.maps)])
            x = stage.rotation.apply(y)
        return x

    def inverse(self, factors) -> np.ndarray:
        x = self._check(factors)
        for stage in reversed(self.stages):
            y = stage.rotation.invert(x)
            x = np.column_stack([m.inverse(y[:, v]) for v, m in enumerate(stage.maps)])
        return x

    def save(self, path) -> None:
        payload = {
            "variable_names": self.variable_names,
            "n_rows": self.n_rows,
            "proxy_history": self.proxy_history,
            "stages": [
                {
                    "maps": [m.to_dict() for m in st.maps],
                    "rotation": st.rotation.matrix.tolist(),
                    "eigenvalues": st.rotation.eigenvalues.tolist(),
                    "rank_deficient": st.rotation.rank_deficient,
                }
                for st in self.stages
            ],
        }
        # json writes floats with repr(), which round-trips exactly
        Path(path).write_text(MAGIC + "\n" + json.dumps(payload) + "\n")

    @classmethod
    def load(cls, path) -> "RbigChain":
        text = Path(path).read_text()
        header, _, body = text.partition("\n")
        if header.strip() != MAGIC:
            raise ValueError(f"{path}: not an RBIG chain file (header {header!r})")
        payload = json.loads(body)
        stages = [
            RbigStage(
                tuple(MarginalMap.from_dict(m) for m in st["maps"]),
                RotationMatrix(
                    np.asarray(st["rotation"], dtype=float),
                    np.asarray(st["eigenvalues"], dtype=float),
                    bool(st["rank_deficient"]),
                ),
            )
            for st in payload["stages"]
        ]
        return cls(stages, payload["variable_names"], payload["n_rows"], payload["proxy_history"])


def rbig_fit_forward(
    data,
    n_iterations: int = 10,
    variable_names: list[str] | None = None,
    early_stop: float | None = None,
) -> tuple[np.ndarray, RbigChain]:
    """Fit an RBIG chain on ``data`` and return its factors.

    ``early_stop`` ends the loop once the negentropy proxy of the current
    factors falls below the given value.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be a 2-D array")
    n, p = x.shape
    if n <= 10 * p:
        raise ValueError(f"need more than {10 * p} rows for {p} variables, got {n}")
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    names = list(variable_names or [f"x{v + 1}" for v in range(p)])

    stages: list[RbigStage] = []
    history: list[float] = []
    for it in range(n_iterations):
        maps = []
        y = np.empty_like(x)
        for v in range(p):
            col = _check_column(x[:, v])
            try:
                # tie order is irrelevant here: a tie group shares one anchor score
                mmap, _, y[:, v] = _fit_map(col, np.argsort(col))
            except DegenerateError:
                raise DegenerateError(
                    f"variable {names[v]!r} is degenerate at iteration {it + 1}"
                ) from None
            maps.append(mmap)
        rot = pca_rotation(y)
        x = rot.apply(y)
        stages.append(RbigStage(tuple(maps), rot))
        history.append(negentropy_proxy(x))
        if early_stop is not None and history[-1] < early_stop:
            break
    return x, RbigChain(stages, names, n, history)


def rbig_inverse(chain: RbigChain, factors) -> np.ndarray:
    return chain.inverse(factors)


def fit_pooled(realisations, observations, n_iterations: int = 10, early_stop=None):
    """Fit one chain on realisation rows and observation rows together.

    ``realisations`` is a SubModel and ``observations`` an ObservationSet.
    Returns ``(factor_realisations, factor_observations, chain)`` where the
    first has the sub-model's (n_real, n_blocks, n_vars) shape.
    """
    ens = realisations.ensemble
    if list(ens.variable_names) != list(observations.variable_names):
        raise SchemaError(
            f"variables differ: {ens.variable_names} vs {observations.variable_names}"
        )
    if len(observations) == 0:
        raise ValueError("pooled transform needs at least one observation")
    n_real, n_blocks, p = ens.values.shape
    pooled = np.vstack([ens.values.reshape(-1, p), observations.values])
    factors, chain = rbig_fit_forward(pooled, n_iterations, ens.variable_names, early_stop)
    n_ens_rows = n_real * n_blocks
    return (
        factors[:n_ens_rows].reshape(n_real, n_blocks, p),
        factors[n_ens_rows:],
        chain,
    )
