import numpy as np
import pytest

from rapidupdate.geostat import demo_spec, make_period_plan, make_truth_and_prior, sample_observations
from rapidupdate.grid import BlockModel, ErrorSpec, GridSpec


def small_case(n_vars=2, nx=12, ny=12, n_real=40, n_periods=2, n_obs=12, seed=0):
    grid = GridSpec(nx, ny, 1, 10.0, 10.0, 4.0)
    spec = demo_spec(grid, n_vars, seed)
    truth, prior = make_truth_and_prior(spec, n_real)
    plan = make_period_plan(grid, n_periods, n_obs, seed)
    periods = sample_observations(truth, grid, plan, ErrorSpec(relative=0.1), seed,
                                  spec.variable_names)
    return BlockModel(grid, prior), truth, periods


@pytest.fixture(scope="session")
def case():
    return small_case()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    for mod in list(sys.modules.values()):
        results = getattr(mod, "ACCEPTANCE_RESULTS", None)
        if results:
            terminalreporter.section("acceptance criteria")
            for n in sorted(results):
                ok, detail = results[n]
                terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
            break
