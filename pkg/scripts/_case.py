"""Shared synthetic case for the scripts."""
from rapidupdate.geostat import demo_spec, make_period_plan, make_truth_and_prior, sample_observations
from rapidupdate.grid import BlockModel, ErrorSpec, GridSpec


def synthetic_case(seed, n_periods=1, n_obs=100, n_vars=3, n=32, n_real=100, rel_err=0.1):
    """Prior block model, truth and per-period observations on an ``n x n x 1`` grid."""
    grid = GridSpec(n, n, 1, 10.0, 10.0, 4.0)
    spec = demo_spec(grid, n_vars, seed)
    truth, prior = make_truth_and_prior(spec, n_real)
    plan = make_period_plan(grid, n_periods, n_obs, seed)
    periods = sample_observations(truth, grid, plan, ErrorSpec(relative=rel_err), seed,
                                  spec.variable_names)
    return BlockModel(grid, prior), truth, periods
