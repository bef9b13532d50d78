"""Synthetic multivariate block models with nugget + spherical variograms.

Factors are simulated by a dense Cholesky decomposition of the block
covariance, mixed linearly to induce cross-correlation and then pushed
through monotone marginal distortions to create skewed variables.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .grid import Ensemble, ErrorSpec, GridSpec, ObservationSet

MAX_DENSE_BLOCKS = 4096

# stream identifiers for per-(operation, seed, factor) RNG derivation
_STREAM_FACTORS = 1
_STREAM_TRUTH = 2
_STREAM_PRIOR = 3
_STREAM_DRILLHOLES = 4
_STREAM_OBS = 5
_STREAM_PLAN = 6


class CapacityError(ValueError):
    pass


class SpecError(ValueError):
    pass


class DecompositionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SphericalStructure:
    sill: float
    range: float

    def __post_init__(self):
        if not self.sill > 0:
            raise SpecError(f"structure sill must be > 0, got {self.sill}")
        if not self.range > 0:
            raise SpecError(f"structure range must be > 0, got {self.range}")


@dataclass(frozen=True)
class VariogramModel:
    nugget: float = 0.0
    structures: tuple[SphericalStructure, ...] = ()

    def __post_init__(self):
        if self.nugget < 0:
            raise SpecError("nugget must be >= 0")
        object.__setattr__(self, "structures", tuple(self.structures))
        if self.sill <= 0:
            raise SpecError("variogram has zero total sill")

    @property
    def sill(self) -> float:
        return self.nugget + sum(s.sill for s in self.structures)

    @property
    def max_range(self) -> float:
        return max((s.range for s in self.structures), default=0.0)

    @classmethod
    def parse(cls, text: str) -> "VariogramModel":
        """Parse notation like ``0.28Nug + 0.33Sph(37) + 0.39Sph(358m)``."""
        nugget = 0.0
        structures = []
        for term in text.replace(" ", "").split("+"):
            if not term:
                continue
            lower = term.lower()
            if lower.endswith("nug"):
                nugget += float(term[:-3])
            elif "sph(" in lower:
                pos = lower.index("sph(")
                sill = float(term[:pos])
                rng = term[pos + 4:].rstrip(")").rstrip("mM")
                structures.append(SphericalStructure(sill, float(rng)))
            else:
                raise SpecError(f"cannot parse variogram term {term!r}")
        return cls(nugget, tuple(structures))

    def __str__(self) -> str:
        terms = [f"{self.nugget:g}Nug"] if self.nugget else []
        terms += [f"{s.sill:g}Sph({s.range:g})" for s in self.structures]
        return " + ".join(terms)


def _spherical(u):
    u = np.minimum(u, 1.0)
    return 1.5 * u - 0.5 * u**3


def variogram_value(model: VariogramModel, h):
    """Semivariance at lag ``h`` (metres). Zero at the origin."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("lag distance must be >= 0")
    gamma = np.where(h > 0, model.nugget, 0.0)
    for s in model.structures:
        gamma = gamma + s.sill * _spherical(h / s.range)
    return float(gamma) if gamma.ndim == 0 else gamma


def _pairwise_distances(xyz: np.ndarray) -> np.ndarray:
    diff = xyz[:, None, :] - xyz[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_covariance(grid: GridSpec, block_indices, model: VariogramModel) -> np.ndarray:
    """Dense block covariance ``sill - gamma(h)``.

    Off-diagonal pairs at zero separation use the h -> 0+ limit, so the
    nugget only appears on the diagonal.
    """
    block_indices = np.asarray(block_indices, dtype=np.int64).reshape(-1)
    if len(block_indices) > MAX_DENSE_BLOCKS:
        raise CapacityError(
            f"{len(block_indices)} blocks exceeds the dense limit of {MAX_DENSE_BLOCKS}"
        )
    d = _pairwise_distances(grid.centres(block_indices))
    structured = np.zeros_like(d)
    for s in model.structures:
        structured += s.sill * (1.0 - _spherical(d / s.range))
    cov = structured
    np.fill_diagonal(cov, model.sill)
    return cov


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * max(float(np.trace(cov)) / len(cov), 1.0)
    try:
        return linalg.cholesky(cov + jitter * np.eye(len(cov)), lower=True)
    except linalg.LinAlgError as exc:
        raise DecompositionError("covariance is not positive semi-definite") from exc


@dataclass(frozen=True)
class MarginalShape:
    """Strictly monotone map from a standard-normal score to a variable.

    ``kind`` is one of ``identity``, ``lognormal`` (``loc + scale*exp(sigma*x)``),
    ``cube`` (``loc + scale*(x + shift)**3``) or ``negative_lognormal``
    (``loc - scale*exp(-sigma*x)``, left skewed). An unshifted cube of a
    symmetric score stays symmetric; ``shift`` > 0 makes it right skewed.
    """

    kind: str = "identity"
    loc: float = 0.0
    scale: float = 1.0
    sigma: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "lognormal", "cube", "negative_lognormal"):
            raise SpecError(f"unknown marginal shape {self.kind!r}")
        if not self.scale > 0 or not self.sigma > 0:
            raise SpecError("marginal shape scale and sigma must be > 0")

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x
        if self.kind == "lognormal":
            return self.loc + self.scale * np.exp(self.sigma * x)
        if self.kind == "negative_lognormal":
            return self.loc - self.scale * np.exp(-self.sigma * x)
        return self.loc + self.scale * (x + self.shift) ** 3

    def invert(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "identity":
            return y
        if self.kind == "lognormal":
            return np.log((y - self.loc) / self.scale) / self.sigma
        if self.kind == "negative_lognormal":
            return -np.log((self.loc - y) / self.scale) / self.sigma
        return np.cbrt((y - self.loc) / self.scale) - self.shift


@dataclass(frozen=True)
class SyntheticSpec:
    grid: GridSpec
    variograms: tuple[VariogramModel, ...]
    mixing_matrix: np.ndarray
    marginal_shapes: tuple[MarginalShape, ...] = ()
    variable_names: tuple[str, ...] = ()
    seed: int = 0
    drillhole_spacing: int = 8
    blend_weight: float = 0.5

    def __post_init__(self):
        n = len(self.variograms)
        mix = np.asarray(self.mixing_matrix, dtype=float)
        object.__setattr__(self, "mixing_matrix", mix)
        if n < 1:
            raise SpecError("at least one variable is required")
        if mix.shape != (n, n):
            raise SpecError(f"mixing_matrix must be {n}x{n}, got {mix.shape}")
        if np.linalg.matrix_rank(mix) < n or abs(np.linalg.det(mix)) < 1e-12:
            raise SpecError("mixing_matrix is singular")
        if not self.marginal_shapes:
            object.__setattr__(self, "marginal_shapes", (MarginalShape(),) * n)
        if len(self.marginal_shapes) != n:
            raise SpecError("one marginal shape per variable is required")
        if not self.variable_names:
            object.__setattr__(self, "variable_names", tuple(f"v{i + 1}" for i in range(n)))
        if len(self.variable_names) != n:
            raise SpecError("one name per variable is required")
        if not 0.0 <= self.blend_weight <= 1.0:
            raise SpecError("blend_weight must be in [0, 1]")
        if self.drillhole_spacing < 1:
            raise SpecError("drillhole_spacing must be >= 1")

    @property
    def n_vars(self) -> int:
        return len(self.variograms)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _factor_choleskys(spec: SyntheticSpec) -> list[np.ndarray]:
    blocks = np.arange(spec.grid.n_blocks)
    return [_cholesky(build_covariance(spec.grid, blocks, m) / m.sill) for m in spec.variograms]


def _factor_fields(spec, n_real, seed, stream, chols=None) -> np.ndarray:
    chols = chols or _factor_choleskys(spec)
    out = np.empty((n_real, spec.grid.n_blocks, spec.n_vars))
    for f, chol in enumerate(chols):
        z = _rng(stream, seed, f).standard_normal((spec.grid.n_blocks, n_real))
        out[:, :, f] = (chol @ z).T
    return out


def simulate_factors(spec: SyntheticSpec, n_real: int, seed: int | None = None) -> Ensemble:
    """Independent standard-Gaussian spatial factors, one per variogram.

    Factor ``f`` draws from its own stream keyed by (operation, seed, f), so a
    factor's realisations do not depend on how many other factors exist.
    """
    seed = spec.seed if seed is None else seed
    values = _factor_fields(spec, n_real, seed, _STREAM_FACTORS)
    return Ensemble(values, [f"factor{f + 1}" for f in range(spec.n_vars)])


def mix_and_distort(spec: SyntheticSpec, factors: np.ndarray) -> np.ndarray:
    """Map factor vectors (..., n_vars) to variables.

    The mixed variables are rescaled to unit variance before the marginal
    distortion, so identity mixing and identity shapes return the factors.
    """
    mix = spec.mixing_matrix
    mixed = factors @ mix.T / np.linalg.norm(mix, axis=1)
    out = np.empty_like(mixed)
    for v, shape in enumerate(spec.marginal_shapes):
        out[..., v] = shape.apply(mixed[..., v])
    return out


def target_correlation(spec: SyntheticSpec) -> np.ndarray:
    """Variable correlation implied by the mixing matrix before distortion."""
    c = spec.mixing_matrix @ spec.mixing_matrix.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def drillhole_blocks(spec: SyntheticSpec) -> np.ndarray:
    """Sparse pseudo-drillhole columns on a regular spacing with a seeded offset."""
    g = spec.grid
    rng = _rng(_STREAM_DRILLHOLES, spec.seed)
    oi, oj = rng.integers(0, spec.drillhole_spacing, size=2)
    ii = np.arange(min(oi, g.nx - 1), g.nx, spec.drillhole_spacing)
    jj = np.arange(min(oj, g.ny - 1), g.ny, spec.drillhole_spacing)
    kk = np.arange(g.nz)
    i, j, k = np.meshgrid(ii, jj, kk, indexing="ij")
    return np.sort(g.block_index(i.ravel(), j.ravel(), k.ravel()))


def _conditioning_weights(spec: SyntheticSpec, holes: np.ndarray) -> np.ndarray:
    """Per (block, factor) blend weight: blend_weight times the factor's
    correlogram at the distance to the nearest drillhole block."""
    xyz = spec.grid.centres()
    hole_xyz = spec.grid.centres(holes)
    d = np.sqrt(((xyz[:, None, :] - hole_xyz[None, :, :]) ** 2).sum(-1)).min(axis=1)
    w = np.empty((len(xyz), spec.n_vars))
    for f, model in enumerate(spec.variograms):
        rho = 1.0 - variogram_value(model, d) / model.sill
        w[:, f] = spec.blend_weight * rho
    return w


def make_truth_and_prior(spec: SyntheticSpec, n_real: int, seed: int | None = None):
    """Return ``(truth, prior)``.

    ``truth`` is an (n_blocks, n_vars) array and ``prior`` an Ensemble of
    ``n_real`` independent draws, blended toward the truth factors around
    sparse pseudo-drillholes (convex blend in factor space).
    """
    seed = spec.seed if seed is None else seed
    chols = _factor_choleskys(spec)
    truth_f = _factor_fields(spec, 1, seed, _STREAM_TRUTH, chols)[0]
    prior_f = _factor_fields(spec, n_real, seed, _STREAM_PRIOR, chols)
    if spec.blend_weight > 0:
        w = _conditioning_weights(spec, drillhole_blocks(spec))
        prior_f = (1.0 - w) * prior_f + w * truth_f
    truth = mix_and_distort(spec, truth_f)
    prior = Ensemble(mix_and_distort(spec, prior_f), list(spec.variable_names))
    return truth, prior


def make_period_plan(grid: GridSpec, n_periods: int, n_per_period: int, seed: int,
                     exclude=()) -> list[np.ndarray]:
    """Disjoint random block sets, one per period."""
    pool = np.setdiff1d(np.arange(grid.n_blocks), np.asarray(exclude, dtype=np.int64))
    need = n_periods * n_per_period
    if need > len(pool):
        raise SpecError(f"plan needs {need} blocks but only {len(pool)} are available")
    chosen = _rng(_STREAM_PLAN, seed).permutation(pool)[:need]
    return [np.sort(chosen[p * n_per_period:(p + 1) * n_per_period]) for p in range(n_periods)]


def sample_observations(
    truth: np.ndarray,
    grid: GridSpec,
    period_plan: Sequence[Sequence[int]],
    error_spec: ErrorSpec,
    seed: int,
    variable_names: Sequence[str] | None = None,
    first_period: int = 1,
) -> list[ObservationSet]:
    """Noisy observations of ``truth`` at the planned blocks.

    Relative noise on a variable whose truth is everywhere non-negative is
    redrawn (up to 100 times) until the observation is non-negative, then
    clamped at 0.
    """
    truth = np.asarray(truth, dtype=float)
    n_vars = truth.shape[1]
    names = list(variable_names or [f"v{i + 1}" for i in range(n_vars)])
    seen: set[int] = set()
    for blocks in period_plan:
        blocks = set(int(b) for b in blocks)
        if blocks & seen:
            raise SpecError("period plan assigns a block to more than one period")
        seen |= blocks
    nonneg = truth.min(axis=0) >= 0

    out = []
    for p, blocks in enumerate(period_plan):
        blocks = np.sort(np.asarray(blocks, dtype=np.int64))
        grid.check_indices(blocks)
        t = truth[blocks]
        if error_spec.relative is not None:
            sd = error_spec.relative * np.abs(t)
        else:
            sd = np.broadcast_to(np.asarray(error_spec.absolute, dtype=float), t.shape)
        rng = _rng(_STREAM_OBS, seed, first_period + p)
        obs = t + sd * rng.standard_normal(t.shape)
        if error_spec.relative is not None:
            for _ in range(100):
                bad = (obs < 0) & nonneg
                if not bad.any():
                    break
                obs[bad] = t[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
            obs = np.where(nonneg & (obs < 0), 0.0, obs)
        out.append(ObservationSet(first_period + p, blocks, obs, names, error_spec))
    return out


def table2_like_variograms(n_vars: int) -> tuple[VariogramModel, ...]:
    """Nugget + two spherical structures per factor, ranges scaled to a
    desk-sized grid (short range 30-55 m, long range 150-350 m)."""
    models = []
    for v in range(n_vars):
        nug = 0.25 + 0.05 * (v % 3)
        short = 0.35 + 0.05 * ((v + 1) % 3)
        models.append(
            VariogramModel(
                nug,
                (
                    SphericalStructure(short, 30.0 + 5.0 * (v % 6)),
                    SphericalStructure(1.0 - nug - short, 150.0 + 40.0 * (v % 5)),
                ),
            )
        )
    return tuple(models)


_DEMO_SHAPES = (
    MarginalShape("lognormal", 0.0, 2.0, 0.5),
    MarginalShape("negative_lognormal", 90.0, 30.0, 0.3),
    MarginalShape("lognormal", 0.0, 0.05, 0.8),
    MarginalShape("lognormal", 0.0, 6.0, 0.25),
    MarginalShape("lognormal", 0.0, 0.05, 0.5),
)


def demo_spec(grid: GridSpec, n_vars: int = 3, seed: int = 0) -> SyntheticSpec:
    """Skewed, cross-correlated variables in the spirit of an iron-ore assay set.

    The capped (negative lognormal) variable keeps headroom above its bulk so
    that noisy observations do not land far outside the prior's support.
    """
    mix = np.eye(n_vars)
    if n_vars > 1:
        mix[1, :2] = (0.7, 0.7)
    if n_vars > 2:
        mix[2, :3] = (-0.5, 0.3, 0.8)
    for v in range(3, n_vars):
        mix[v, v - 1] = 0.5 if v % 2 else -0.5
    shapes = tuple(_DEMO_SHAPES[v % len(_DEMO_SHAPES)] for v in range(n_vars))
    return SyntheticSpec(
        grid, table2_like_variograms(n_vars), mix, shapes,
        tuple(f"assay{v + 1}" for v in range(n_vars)), seed,
    )
