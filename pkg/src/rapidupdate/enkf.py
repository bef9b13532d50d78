"""Ensemble Kalman filter with multiple data assimilations (ES-MDA style).

Works on one Gaussian factor at a time. The observation operator is an
identity selection: every observation sits on a state block.

Shapes follow the ``(n_real, n_blocks)`` convention of the block model, so
realisations are rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg


class ScheduleError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MdaSchedule:
    """Inflation coefficients; ``sum(1/alpha) == 1`` is enforced."""

    alphas: tuple[float, ...]

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if len(alphas) < 1:
            raise ScheduleError("at least one assimilation is required")
        if any(not a > 0 for a in alphas):
            raise ScheduleError("inflation coefficients must be > 0")
        total = sum(1.0 / a for a in alphas)
        if abs(total - 1.0) > 1e-12:
            raise ScheduleError(f"sum of 1/alpha is {total!r}, must be 1")

    @classmethod
    def uniform(cls, n_assimilations: int) -> "MdaSchedule":
        if n_assimilations < 1:
            raise ScheduleError("n_assimilations must be >= 1")
        return cls((float(n_assimilations),) * n_assimilations)

    @property
    def n_assimilations(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class LocalizationSpec:
    radius: float = 30.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"localisation radius must be > 0, got {self.radius}")


@dataclass
class AssimilationState:
    """One factor's ensemble plus the observations that act on it.

    ``obs_positions`` index columns of ``ensemble``; ``block_xyz`` holds the
    centre of every state block in metres.
    """

    ensemble: np.ndarray
    observations: np.ndarray
    obs_positions: np.ndarray
    error_variance: np.ndarray
    block_xyz: np.ndarray

    def __post_init__(self):
        self.ensemble = np.asarray(self.ensemble, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float).reshape(-1)
        self.obs_positions = np.asarray(self.obs_positions, dtype=np.int64).reshape(-1)
        self.error_variance = np.broadcast_to(
            np.asarray(self.error_variance, dtype=float), self.observations.shape
        ).copy()
        self.block_xyz = np.asarray(self.block_xyz, dtype=float)
        n_real, n_blocks = self.ensemble.shape
        if n_real < 2:
            raise ValueError("ensemble needs at least two realisations")
        if len(self.obs_positions) != len(self.observations):
            raise ValueError("one position per observation is required")
        if self.obs_positions.size and (
            self.obs_positions.min() < 0 or self.obs_positions.max() >= n_blocks
        ):
            raise ValueError("observation position outside the state")
        if self.block_xyz.shape != (n_blocks, 3):
            raise ValueError("block_xyz must be (n_blocks, 3)")
        if np.any(self.error_variance < 0):
            raise ValueError("error variances must be >= 0")

    @property
    def obs_xyz(self) -> np.ndarray:
        return self.block_xyz[self.obs_positions]


def gaspari_cohn(d, L: float):
    """Gaspari-Cohn taper of distance ``d`` for localisation radius ``L``.

    Support is ``[0, 2L)``; the value is 5/24 at ``d == L``.
    """
    if not L > 0:
        raise ValueError(f"localisation radius must be > 0, got {L}")
    r = np.asarray(d, dtype=float) / L
    out = np.zeros_like(r)
    inner = r < 1.0
    outer = (r >= 1.0) & (r < 2.0)
    a = r[inner]
    out[inner] = (((-0.25 * a + 0.5) * a + 0.625) * a - 5.0 / 3.0) * a**2 + 1.0
    b = r[outer]
    out[outer] = (
        ((((b / 12.0 - 0.5) * b + 0.625) * b + 5.0 / 3.0) * b - 5.0) * b + 4.0
        - 2.0 / (3.0 * b)
    )
    # cancellation leaves ~1e-16 negatives just inside 2L
    np.maximum(out, 0.0, out=out)
    return float(out) if out.ndim == 0 else out


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        (a[:, None, 0] - b[None, :, 0]) ** 2
        + (a[:, None, 1] - b[None, :, 1]) ** 2
        + (a[:, None, 2] - b[None, :, 2]) ** 2
    )
    return np.sqrt(d2)


def localization_weights(block_xyz, obs_xyz, loc: LocalizationSpec | None):
    """Gaspari-Cohn weights ``(block-obs, obs-obs)``; all ones when ``loc`` is None."""
    block_xyz = np.asarray(block_xyz, dtype=float)
    obs_xyz = np.asarray(obs_xyz, dtype=float)
    if loc is None:
        return np.ones((len(block_xyz), len(obs_xyz))), np.ones((len(obs_xyz),) * 2)
    return (
        gaspari_cohn(_distances(block_xyz, obs_xyz), loc.radius),
        gaspari_cohn(_distances(obs_xyz, obs_xyz), loc.radius),
    )


def assimilation_rng(seed, assimilation: int) -> np.random.Generator:
    """Generator for one assimilation; ``seed`` is an int or tuple of ints."""
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng([*map(int, key), int(assimilation)])


def perturb_observations(observations, error_variance, alpha: float, seed,
                         assimilation: int = 0, n_real: int = 1) -> np.ndarray:
    """One perturbed copy of the observations per realisation.

    Noise variance is ``alpha * error_variance``. Returns ``(n_real, n_obs)``.
    """
    obs = np.asarray(observations, dtype=float).reshape(-1)
    var = np.broadcast_to(np.asarray(error_variance, dtype=float), obs.shape)
    if np.any(var < 0):
        raise ValueError("error variances must be >= 0")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    rng = assimilation_rng(seed, assimilation)
    noise = rng.standard_normal((n_real, len(obs)))
    return obs + noise * np.sqrt(alpha * var)


def _anomalies(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0)


def _innovation_factor(c_dd, obs_var, alpha):
    s = c_dd + np.diag(alpha * np.asarray(obs_var, dtype=float))
    try:
        return linalg.cho_factor(s, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * max(float(np.trace(s)) / max(len(s), 1), np.finfo(float).tiny)
    try:
        return linalg.cho_factor(s + jitter * np.eye(len(s)), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SolverError("innovation covariance is singular") from exc


def _localized_covariances(states, predictions, rho_yd, rho_dd):
    n_real = states.shape[0]
    da = _anomalies(predictions)
    c_yd = _anomalies(states).T @ da / (n_real - 1)
    c_dd = da.T @ da / (n_real - 1)
    if rho_yd is not None:
        c_yd *= rho_yd
    if rho_dd is not None:
        c_dd *= rho_dd
    c_dd = 0.5 * (c_dd + c_dd.T)
    return c_yd, c_dd


def kalman_gain(states, predictions, obs_error_variance, rho_yd=None, rho_dd=None,
                alpha: float = 1.0) -> np.ndarray:
    """Localised Kalman gain, shape ``(n_blocks, n_obs)``.

    ``K = (rho_yd * C_YD) (rho_dd * C_DD + alpha * C_D)^-1`` with ensemble
    covariances using an ``n_real - 1`` divisor and diagonal ``C_D``. The
    system is solved by Cholesky factorisation.
    """
    states = np.asarray(states, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if states.shape[0] < 2 or states.shape[0] != predictions.shape[0]:
        raise ValueError("states and predictions need the same >= 2 realisations")
    c_yd, c_dd = _localized_covariances(states, predictions, rho_yd, rho_dd)
    factor = _innovation_factor(c_dd, obs_error_variance, alpha)
    return linalg.cho_solve(factor, c_yd.T, check_finite=False).T


def update_ensemble(states, gain, perturbed_obs, predictions) -> np.ndarray:
    """``Z + (D - H) K^T`` for each realisation; zero gain rows stay bit-identical."""
    states = np.asarray(states, dtype=float)
    gain = np.asarray(gain, dtype=float)
    innov = np.asarray(perturbed_obs, dtype=float) - np.asarray(predictions, dtype=float)
    if gain.shape != (states.shape[1], innov.shape[1]) or innov.shape[0] != states.shape[0]:
        raise ValueError(
            f"shape mismatch: states {states.shape}, gain {gain.shape}, innovations {innov.shape}"
        )
    out = states.copy()
    active = np.any(gain != 0.0, axis=1)
    out[:, active] += innov @ gain[active].T
    return out


@dataclass
class AssimilationDiagnostics:
    iteration: int
    factor: int
    mean_abs_innovation: float
    mean_abs_gain: float


def assimilate_once(state: AssimilationState, alpha: float, rho_yd, rho_dd, seed,
                    assimilation: int = 0) -> tuple[np.ndarray, float, float]:
    """One localised EnKF analysis with inflation ``alpha``.

    Returns the analysed ensemble, the mean |innovation| and the mean |gain|
    over the observed blocks' rows. The full gain matrix is never formed:
    the update is ``(rho_yd * C_YD) S^-1 (D - H)^T``.
    """
    z = state.ensemble
    n_real = z.shape[0]
    h = z[:, state.obs_positions]
    d = perturb_observations(
        state.observations, state.error_variance, alpha, seed, assimilation, n_real
    )
    innov = d - h

    c_yd, c_dd = _localized_covariances(z, h, rho_yd, rho_dd)
    factor = _innovation_factor(c_dd, state.error_variance, alpha)
    weights = linalg.cho_solve(factor, innov.T, check_finite=False)  # (n_obs, n_real)
    out = z.copy()
    active = np.any(c_yd != 0.0, axis=1)
    out[:, active] += (c_yd[active] @ weights).T
    gain_obs = linalg.cho_solve(factor, c_yd[state.obs_positions].T, check_finite=False)
    return out, float(np.mean(np.abs(innov))), float(np.mean(np.abs(gain_obs)))


def enkf_mda(
    state: AssimilationState,
    schedule: MdaSchedule,
    loc: LocalizationSpec | None,
    seed,
    weights: tuple[np.ndarray, np.ndarray] | None = None,
    factor: int = 0,
    diagnostics: list | None = None,
) -> np.ndarray:
    """Assimilate the same observations ``schedule.n_assimilations`` times.

    Assimilation ``i`` perturbs the observations with variance
    ``alpha_i * sigma^2`` from its own RNG stream and inflates ``C_D`` by
    ``alpha_i``. Precomputed localisation ``weights`` may be passed to share
    them between factors. Records are appended to ``diagnostics`` if given.
    """
    if weights is None:
        weights = localization_weights(state.block_xyz, state.obs_xyz, loc)
    rho_yd, rho_dd = weights
    current = AssimilationState(
        state.ensemble.copy(), state.observations, state.obs_positions,
        state.error_variance, state.block_xyz,
    )
    for i, alpha in enumerate(schedule.alphas):
        current.ensemble, innov, gain = assimilate_once(
            current, alpha, rho_yd, rho_dd, seed, i
        )
        if diagnostics is not None:
            diagnostics.append(AssimilationDiagnostics(i + 1, factor, innov, gain))
    return current.ensemble


def write_diagnostics_csv(path, records: Sequence[AssimilationDiagnostics]) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,factor,mean_abs_innovation,mean_abs_gain\n")
        for r in records:
            fh.write(f"{r.iteration},{r.factor},{r.mean_abs_innovation:.12g},{r.mean_abs_gain:.12g}\n")
