"""Rapid updating of multivariate block-model ensembles.

Pooled RBIG Gaussianisation, localised EnKF with multiple data assimilations,
and a sequential per-period driver with a small command-line front end.
"""
from .enkf import LocalizationSpec, MdaSchedule, enkf_mda, gaspari_cohn, kalman_gain
from .geostat import SyntheticSpec, VariogramModel, demo_spec, make_truth_and_prior
from .grid import BlockModel, Ensemble, ErrorSpec, GridSpec, ObservationSet
from .pipeline import PeriodReport, UpdateConfig, sequential_run, update_period
from .rbig import RbigChain, rbig_fit_forward, rbig_inverse

__all__ = [
    "BlockModel", "Ensemble", "ErrorSpec", "GridSpec", "LocalizationSpec", "MdaSchedule",
    "ObservationSet", "PeriodReport", "RbigChain", "SyntheticSpec", "UpdateConfig",
    "VariogramModel", "demo_spec", "enkf_mda", "gaspari_cohn", "kalman_gain",
    "make_truth_and_prior", "rbig_fit_forward", "rbig_inverse", "sequential_run",
    "update_period",
]
