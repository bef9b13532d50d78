"""One-period and sequential updating of a block-model ensemble.

A period update selects the neighbourhood of the new observations, fits a
pooled RBIG chain on the neighbourhood realisations and observations,
assimilates every factor with EnKF-MDA, back-transforms, and writes the
neighbourhood back into a copy of the model.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .enkf import (
    AssimilationDiagnostics,
    AssimilationState,
    LocalizationSpec,
    MdaSchedule,
    enkf_mda,
    localization_weights,
)
from .grid import (
    BlockModel,
    EmptySelectionError,
    GridSpec,
    ObservationSet,
    SubModel,
    extract_submodel,
    insert_submodel,
)
from .rbig import fit_pooled

log = logging.getLogger(__name__)


class UndefinedReductionError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class UpdateConfig:
    radius_blocks: int = 3
    localization_m: float = 30.0
    n_assimilations: int = 10
    alphas: tuple[float, ...] | None = None
    rbig_iterations: int = 10
    rbig_early_stop: float | None = None
    include_previous_observations: bool = True
    # observation error variance in factor units; None derives it from the
    # observations' ErrorSpec (relative fraction squared)
    factor_error_variance: float | tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.radius_blocks < 1:
            raise ValueError("radius_blocks must be >= 1")
        if self.rbig_iterations < 1:
            raise ValueError("rbig_iterations must be >= 1")
        LocalizationSpec(self.localization_m)
        self.schedule  # validates alphas

    @property
    def schedule(self) -> MdaSchedule:
        if self.alphas is not None:
            if len(self.alphas) != self.n_assimilations:
                raise ValueError("alphas length must equal n_assimilations")
            return MdaSchedule(tuple(self.alphas))
        return MdaSchedule.uniform(self.n_assimilations)

    @property
    def localization(self) -> LocalizationSpec:
        return LocalizationSpec(self.localization_m)


@dataclass
class PeriodReport:
    period: int
    variables: list[str]
    mse_before: list[float]
    mse_after: list[float]
    mse_reduction_pct: list[float]
    var_before: list[float]
    var_after: list[float]
    variance_reduced_fraction: list[float]
    n_neighborhood: int
    n_observations: int
    n_history_merged: int
    factor_mse_before: list[float]
    factor_mse_after: list[float]
    seconds: dict[str, float]
    diagnostics: list[dict] = field(default_factory=list)
    # (n_obs, n_vars) arrays for prediction-vs-observation plots; not in JSON
    scatter: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("scatter")
        for key in ("mse_reduction_pct",):
            d[key] = [None if (v is None or math.isnan(v)) else v for v in d[key]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PeriodReport":
        d = dict(d)
        d["mse_reduction_pct"] = [float("nan") if v is None else v for v in d["mse_reduction_pct"]]
        return cls(**d)


def mse_reduction(mse_before: float, mse_after: float) -> float:
    """Percentage reduction ``(before - after) / before * 100``; negative if worse."""
    if mse_before == 0:
        raise UndefinedReductionError("MSE reduction is undefined when mse_before is 0")
    if mse_before < 0 or mse_after < 0:
        raise ValueError("MSE values must be >= 0")
    return (mse_before - mse_after) / mse_before * 100.0


def _safe_reduction(before: float, after: float) -> float:
    try:
        return mse_reduction(before, after)
    except UndefinedReductionError:
        return float("nan")


def select_neighborhood(grid: GridSpec, block_indices, radius_blocks: int) -> np.ndarray:
    """All blocks within a Chebyshev block distance of any observation block."""
    if radius_blocks < 1:
        raise ValueError("radius_blocks must be >= 1")
    idx = np.asarray(block_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise EmptySelectionError("no observation blocks to build a neighbourhood from")
    i, j, k = grid.block_ijk(idx)
    r = np.arange(-radius_blocks, radius_blocks + 1)
    di, dj, dk = (a.ravel() for a in np.meshgrid(r, r, r, indexing="ij"))
    ci = (i[:, None] + di).ravel()
    cj = (j[:, None] + dj).ravel()
    ck = (k[:, None] + dk).ravel()
    ok = (
        (ci >= 0) & (ci < grid.nx) & (cj >= 0) & (cj < grid.ny) & (ck >= 0) & (ck < grid.nz)
    )
    return np.unique(grid.block_index(ci[ok], cj[ok], ck[ok]))


def merge_previous_observations(
    current: ObservationSet,
    history: Sequence[ObservationSet],
    neighborhood,
) -> ObservationSet:
    """Current records plus historical records inside the neighbourhood.

    A block observed more than once keeps only its newest record.
    """
    neighborhood = np.asarray(neighborhood, dtype=np.int64)
    taken = set(int(b) for b in current.block_indices)
    blocks = [current.block_indices]
    values = [current.values]
    for past in sorted(history, key=lambda o: o.period, reverse=True):
        if past.variable_names != current.variable_names:
            raise ValueError(f"period {past.period} has different variables")
        inside = np.isin(past.block_indices, neighborhood)
        fresh = np.array([int(b) not in taken for b in past.block_indices], dtype=bool)
        keep = inside & fresh
        if keep.any():
            blocks.append(past.block_indices[keep])
            values.append(past.values[keep])
            taken.update(int(b) for b in past.block_indices[keep])
    merged = ObservationSet(
        current.period, np.concatenate(blocks), np.vstack(values),
        current.variable_names, current.error_spec,
    )
    return merged.sorted()


def factor_error_variances(config: UpdateConfig, obs: ObservationSet,
                           pooled_sd: np.ndarray) -> np.ndarray:
    """Observation error variance for each factor."""
    n = len(obs.variable_names)
    if config.factor_error_variance is not None:
        return np.broadcast_to(np.asarray(config.factor_error_variance, dtype=float), (n,)).copy()
    spec = obs.error_spec
    if spec.relative is not None:
        return np.full(n, spec.relative**2)
    ratio = np.asarray(spec.absolute, dtype=float) / pooled_sd
    return np.full(n, float(np.mean(ratio**2)))


def period_seed(config: UpdateConfig, period: int) -> tuple[int, int]:
    return (int(config.seed), int(period))


def update_period(
    model: BlockModel,
    observations: ObservationSet,
    history: Sequence[ObservationSet],
    config: UpdateConfig,
) -> tuple[BlockModel, PeriodReport]:
    """Update ``model`` with one period of observations.

    Returns a new model; ``model`` itself is never modified, so a failure at
    any stage leaves the caller's state intact.
    """
    if observations.variable_names != model.variable_names:
        raise ValueError(
            f"observation variables {observations.variable_names} do not match "
            f"model variables {model.variable_names}"
        )
    observations.validate_for(model.grid)
    grid = model.grid
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    neighborhood = select_neighborhood(grid, observations.block_indices, config.radius_blocks)
    if config.include_previous_observations and history:
        merged = merge_previous_observations(observations, history, neighborhood)
    else:
        merged = observations.sorted()
    sub = extract_submodel(model, neighborhood)
    timings["select"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    zf, of, chain = fit_pooled(sub, merged, config.rbig_iterations, config.rbig_early_stop)
    timings["transform"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    obs_pos = np.searchsorted(sub.block_indices, merged.block_indices)
    block_xyz = grid.centres(sub.block_indices)
    pooled_sd = np.concatenate(
        [sub.ensemble.values.reshape(-1, sub.ensemble.n_vars), merged.values]
    ).std(axis=0)
    err_var = factor_error_variances(config, observations, pooled_sd)
    weights = localization_weights(block_xyz, block_xyz[obs_pos], config.localization)
    schedule = config.schedule
    diagnostics: list[AssimilationDiagnostics] = []
    zf_new = np.empty_like(zf)
    for f in range(zf.shape[2]):
        state = AssimilationState(zf[:, :, f], of[:, f], obs_pos, err_var[f], block_xyz)
        zf_new[:, :, f] = enkf_mda(
            state, schedule, config.localization,
            seed=(*period_seed(config, observations.period), f),
            weights=weights, factor=f, diagnostics=diagnostics,
        )
    timings["assimilate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    n_real, n_sub, p = zf.shape
    back = chain.inverse(zf_new.reshape(-1, p)).reshape(n_real, n_sub, p)
    # rows the filter did not move keep their original values bit for bit
    untouched = np.all(zf_new == zf, axis=2)
    back[untouched] = sub.ensemble.values[untouched]
    if not np.all(np.isfinite(back)):
        raise FloatingPointError("non-finite values after back-transformation")
    timings["inverse"] = time.perf_counter() - t0

    updated = model.copy()
    new_sub = SubModel(sub.block_indices, type(sub.ensemble)(back, sub.ensemble.variable_names),
                       sub.parent_link)
    insert_submodel(updated, new_sub)

    # metrics on the current period's observations only
    cur_pos = np.searchsorted(sub.block_indices, observations.sorted().block_indices)
    cur_obs = observations.sorted().values
    prior_at = sub.ensemble.values[:, cur_pos, :]
    post_at = back[:, cur_pos, :]
    prior_mean = prior_at.mean(axis=0)
    post_mean = post_at.mean(axis=0)
    mse_b = np.mean((prior_mean - cur_obs) ** 2, axis=0)
    mse_a = np.mean((post_mean - cur_obs) ** 2, axis=0)
    var_b = prior_at.var(axis=0, ddof=1)
    var_a = post_at.var(axis=0, ddof=1)

    cur_in_merged = np.searchsorted(merged.block_indices, observations.sorted().block_indices)
    of_cur = of[cur_in_merged]
    fmse_b = np.mean((zf[:, cur_pos, :].mean(axis=0) - of_cur) ** 2, axis=0)
    fmse_a = np.mean((zf_new[:, cur_pos, :].mean(axis=0) - of_cur) ** 2, axis=0)

    report = PeriodReport(
        period=observations.period,
        variables=list(model.variable_names),
        mse_before=mse_b.tolist(),
        mse_after=mse_a.tolist(),
        mse_reduction_pct=[_safe_reduction(b, a) for b, a in zip(mse_b, mse_a)],
        var_before=var_b.mean(axis=0).tolist(),
        var_after=var_a.mean(axis=0).tolist(),
        variance_reduced_fraction=np.mean(var_a < var_b, axis=0).tolist(),
        n_neighborhood=int(len(neighborhood)),
        n_observations=int(len(merged)),
        n_history_merged=int(len(merged) - len(observations)),
        factor_mse_before=fmse_b.tolist(),
        factor_mse_after=fmse_a.tolist(),
        seconds=timings,
        diagnostics=[asdict(d) for d in diagnostics],
        scatter={
            "block_index": observations.sorted().block_indices,
            "observed": cur_obs,
            "predicted_prior": prior_mean,
            "predicted_updated": post_mean,
        },
    )
    log.info(
        "period %d: %d obs (%d from history), %d blocks, MSE reduction %s",
        report.period, report.n_observations, report.n_history_merged,
        report.n_neighborhood, ["%.1f" % r for r in report.mse_reduction_pct],
    )
    return updated, report


class PartialRunError(RuntimeError):
    """A period failed; ``model`` and ``reports`` hold the completed periods."""

    def __init__(self, period: int, model: BlockModel, reports: list[PeriodReport],
                 cause: BaseException):
        super().__init__(f"period {period} failed: {cause}")
        self.period = period
        self.model = model
        self.reports = reports


def sequential_run(
    model: BlockModel,
    periods: Sequence[ObservationSet],
    config: UpdateConfig,
    on_period: Callable[[BlockModel, PeriodReport], None] | None = None,
) -> tuple[BlockModel, list[PeriodReport]]:
    """Apply :func:`update_period` to each period in order, threading history."""
    order = [p.period for p in periods]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ValueError("periods must be strictly increasing")
    history: list[ObservationSet] = []
    reports: list[PeriodReport] = []
    for obs in periods:
        try:
            model, report = update_period(model, obs, history, config)
        except Exception as exc:
            raise PartialRunError(obs.period, model, reports, exc) from exc
        history.append(obs)
        reports.append(report)
        if on_period is not None:
            on_period(model, report)
    return model, reports


def cumulative_mse(prior: BlockModel, final: BlockModel,
                   periods: Sequence[ObservationSet]) -> dict[str, list[float]]:
    """MSE of prior and final ensemble means against all periods' observations."""
    blocks = np.concatenate([p.block_indices for p in periods])
    obs = np.vstack([p.values for p in periods])
    before = np.mean((prior.ensemble.values[:, blocks, :].mean(axis=0) - obs) ** 2, axis=0)
    after = np.mean((final.ensemble.values[:, blocks, :].mean(axis=0) - obs) ** 2, axis=0)
    return {
        "variables": list(prior.variable_names),
        "mse_before": before.tolist(),
        "mse_after": after.tolist(),
        "mse_reduction_pct": [_safe_reduction(b, a) for b, a in zip(before, after)],
    }


def _spearman_matrix(values: np.ndarray) -> np.ndarray:
    ranks = np.column_stack([rankdata(values[:, v]) for v in range(values.shape[1])])
    return np.atleast_2d(np.corrcoef(ranks, rowvar=False))


def correlation_preservation(before, after) -> np.ndarray:
    """|change| in pairwise Spearman correlation over pooled (realisation, block) rows.

    Accepts SubModels, Ensembles or (n_real, n_blocks, n_vars) arrays.
    """
    def rows(x):
        x = getattr(x, "ensemble", x)
        x = np.asarray(getattr(x, "values", x))
        return x.reshape(-1, x.shape[-1])

    a, b = rows(before), rows(after)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.abs(_spearman_matrix(b) - _spearman_matrix(a))


REPORT_CSV_HEADER = (
    "period,variable,mse_before,mse_after,mse_reduction_pct,var_before,var_after,"
    "seconds_transform,seconds_assim,seconds_inverse"
)
SCATTER_CSV_HEADER = "period,variable,observed,predicted_prior,predicted_updated"


def _g(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.12g}"


def report_csv_rows(report: PeriodReport) -> list[str]:
    s = report.seconds
    return [
        ",".join([
            str(report.period), v, _g(report.mse_before[i]), _g(report.mse_after[i]),
            _g(report.mse_reduction_pct[i]), _g(report.var_before[i]), _g(report.var_after[i]),
            _g(s.get("transform", 0.0)), _g(s.get("assimilate", 0.0)), _g(s.get("inverse", 0.0)),
        ])
        for i, v in enumerate(report.variables)
    ]


def scatter_csv_rows(report: PeriodReport) -> list[str]:
    sc = report.scatter
    if sc is None:
        return []
    out = []
    for i, v in enumerate(report.variables):
        for o, pp, pu in zip(sc["observed"][:, i], sc["predicted_prior"][:, i],
                             sc["predicted_updated"][:, i]):
            out.append(f"{report.period},{v},{_g(o)},{_g(pp)},{_g(pu)}")
    return out


def write_report_json(path, report: PeriodReport, include_timings: bool = True) -> None:
    d = report.to_dict()
    if not include_timings:
        d["seconds"] = {}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_report_json(path) -> PeriodReport:
    return PeriodReport.from_dict(json.loads(Path(path).read_text()))
