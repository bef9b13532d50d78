import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rapidupdate.grid import (
    BlockModel,
    EmptySelectionError,
    Ensemble,
    ErrorSpec,
    GridError,
    GridSpec,
    LinkError,
    ObservationSet,
    SubModel,
    block_index,
    extract_submodel,
    insert_submodel,
)


def make_model(nx=4, ny=4, nz=2, n_real=3, n_vars=2, seed=0):
    grid = GridSpec(nx, ny, nz, 10.0, 10.0, 4.0)
    values = np.random.default_rng(seed).normal(size=(n_real, grid.n_blocks, n_vars))
    return BlockModel(grid, Ensemble(values, [f"v{i}" for i in range(n_vars)]))


def test_block_index_corners():
    g = GridSpec(4, 4, 2, 1, 1, 1)
    assert block_index(g, 0, 0, 0) == 0
    assert block_index(g, 3, 3, 1) == 31


def test_block_index_enumeration_is_bijective():
    g = GridSpec(4, 4, 2, 1, 1, 1)
    idx = [block_index(g, i, j, k) for i, j, k in itertools.product(range(4), range(4), range(2))]
    assert sorted(idx) == list(range(32))
    for b in idx:
        assert block_index(g, *g.block_ijk(b)) == b


@pytest.mark.parametrize("ijk", [(-1, 0, 0), (4, 0, 0), (0, 4, 0), (0, 0, 2)])
def test_block_index_out_of_range(ijk):
    with pytest.raises(GridError):
        block_index(GridSpec(4, 4, 2, 1, 1, 1), *ijk)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 8))
def test_index_is_permutation(nx, ny, nz):
    g = GridSpec(nx, ny, nz, 1, 1, 1)
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = g.block_index(i.ravel(), j.ravel(), k.ravel())
    assert np.array_equal(np.sort(idx), np.arange(nx * ny * nz))
    back = g.block_ijk(idx)
    assert np.array_equal(back[0], i.ravel()) and np.array_equal(back[2], k.ravel())


@pytest.mark.parametrize("kw", [dict(nx=0), dict(dy=0.0), dict(dz=-1.0)])
def test_gridspec_rejects_bad_geometry(kw):
    base = dict(nx=2, ny=2, nz=2, dx=1.0, dy=1.0, dz=1.0)
    base.update(kw)
    with pytest.raises(GridError):
        GridSpec(**base)


def test_centres_and_snapping():
    g = GridSpec(3, 2, 1, 10.0, 5.0, 4.0, x0=100.0, y0=-5.0)
    c = g.centres(g.block_index(2, 1, 0))
    assert np.allclose(c, [[125.0, 2.5, 2.0]])
    assert g.snap_to_block(c)[0] == g.block_index(2, 1, 0)
    # exactly between blocks 0 and 1 along x goes to the lower one
    assert g.snap_to_block([[110.0, 0.0, 0.0]])[0] == 0
    assert g.snap_to_block([[1e6, -1e6, 0.0]])[0] == g.block_index(2, 0, 0)


def test_ensemble_invariants():
    with pytest.raises(ValueError):
        Ensemble(np.zeros((1, 3, 1)), ["a"])
    with pytest.raises(ValueError):
        Ensemble(np.full((2, 3, 1), np.nan), ["a"])
    with pytest.raises(ValueError):
        Ensemble(np.zeros((2, 3, 2)), ["a"])


def test_observation_set_rejects_duplicates():
    with pytest.raises(ValueError):
        ObservationSet(1, [3, 3], np.zeros((2, 1)), ["a"])


def test_error_spec_exactly_one():
    with pytest.raises(ValueError):
        ErrorSpec(relative=None, absolute=None)
    with pytest.raises(ValueError):
        ErrorSpec(relative=0.1, absolute=(1.0,))


def test_extract_full_is_identity():
    m = make_model()
    sub = extract_submodel(m, np.arange(m.grid.n_blocks))
    assert np.array_equal(sub.ensemble.values, m.ensemble.values)


def test_extract_single_block():
    m = make_model()
    sub = extract_submodel(m, [7])
    assert sub.ensemble.n_blocks == 1
    assert np.array_equal(sub.ensemble.values[:, 0, :], m.ensemble.values[:, 7, :])


def test_extract_errors():
    m = make_model()
    with pytest.raises(EmptySelectionError):
        extract_submodel(m, [])
    with pytest.raises(GridError):
        extract_submodel(m, [0, 99])


def test_insert_unmodified_is_noop():
    m = make_model()
    before = m.ensemble.values.copy()
    insert_submodel(m, extract_submodel(m, [1, 5, 9]))
    assert np.array_equal(m.ensemble.values, before)


def test_insert_zeros():
    m = make_model()
    before = m.ensemble.values.copy()
    sub = extract_submodel(m, [2, 3, 17])
    sub.ensemble.values[:] = 0.0
    insert_submodel(m, sub)
    expected = before.copy()
    expected[:, [2, 3, 17], :] = 0.0
    assert np.array_equal(m.ensemble.values, expected)


def test_insert_rejects_foreign_submodel():
    m = make_model()
    sub = extract_submodel(m, [1])
    other = BlockModel(m.grid, m.ensemble.copy(), model_id="other")
    with pytest.raises(LinkError):
        insert_submodel(other, sub)


def test_submodel_requires_sorted_unique():
    m = make_model()
    with pytest.raises(ValueError):
        SubModel(np.array([3, 1]), extract_submodel(m, [1, 3]).ensemble, "model")


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_extract_insert_round_trip(data):
    m = make_model(seed=data.draw(st.integers(0, 1000)))
    idx = data.draw(st.lists(st.integers(0, m.grid.n_blocks - 1), min_size=1, unique=True))
    new = np.random.default_rng(len(idx)).normal(size=(m.ensemble.n_real, len(idx), 2))
    expected = m.ensemble.values.copy()
    for c, b in enumerate(idx):
        expected[:, b, :] = new[:, c, :]
    sub = extract_submodel(m, idx)
    order = np.argsort(idx)
    sub.ensemble.values[:] = new[:, order, :]
    insert_submodel(m, sub)
    assert np.array_equal(m.ensemble.values, expected)
    again = extract_submodel(m, idx)
    assert np.array_equal(again.ensemble.values, sub.ensemble.values)
