import numpy as np
import pytest
from hypothesis import given, strategies as st

from scnet.data_model import (AtlasPartition, CoordinateTable, SubjectData, TemporalSplit, check_timeseries,
                              fit_stats, lag_pair, split, standardize)
from scnet.errors import (DataError, DuplicateCoordinate, EmptySubset, InvalidSplit, NonFiniteValue,
                          ZeroVariance)


def test_default_split_matches_688_points():
    assert TemporalSplit.default(688).widths(688) == (550, 68, 70)


@given(st.integers(min_value=20, max_value=5000))
def test_split_widths_sum_to_T(T):
    pol = TemporalSplit.default(T)
    assert sum(pol.widths(T)) == T


def test_split_blocks():
    X = np.arange(30.0).reshape(3, 10)
    tr, va, te = split(X, TemporalSplit(8, 9))
    assert tr.shape == (3, 8) and va.shape == (3, 1) and te.shape == (3, 1)
    assert te[0, 0] == 9.0


@pytest.mark.parametrize("tr,va", [(0, 5), (5, 5), (6, 5), (5, 10)])
def test_invalid_split(tr, va):
    with pytest.raises(InvalidSplit):
        TemporalSplit(tr, va).validate(10)


def test_timeseries_checks():
    with pytest.raises(DataError):
        check_timeseries(np.zeros((2, 2)))
    bad = np.zeros((2, 5))
    bad[1, 3] = np.nan
    with pytest.raises(NonFiniteValue, match="element index 8"):
        check_timeseries(bad)
    X = check_timeseries(np.zeros((2, 5)))
    assert not X.flags.writeable and X.dtype == np.float64


def test_lag_pair():
    X = np.arange(12.0).reshape(3, 4)
    past, fut = lag_pair(X, [0, 2])
    assert np.array_equal(past, X[[0, 2], :3]) and np.array_equal(fut, X[[0, 2], 1:])
    past, fut = lag_pair(X, [1], target_rows=[0, 2])
    assert fut.shape == (2, 3)
    with pytest.raises(EmptySubset):
        lag_pair(X, [])


def test_standardization_uses_train_only(rng):
    X = rng.standard_normal((4, 50)) + 3.0
    stats = fit_stats(X[:, :40])
    Z = standardize(X, stats)
    assert np.abs(Z[:, :40].mean(axis=1)).max() < 1e-12
    assert stats.std is None
    scaled = fit_stats(X[:, :40], scale=True).apply(X[:, :40])
    assert np.allclose(scaled.std(axis=1), 1.0)
    with pytest.raises(ZeroVariance):
        fit_stats(np.ones((2, 10)), scale=True)


def test_atlas_validation_and_regions():
    a = AtlasPartition(np.array([2, 1, 2, 3, 1]), 3)
    assert [r.tolist() for r in a.regions()] == [[1, 4], [0, 2], [3]]
    with pytest.raises(DataError):
        AtlasPartition(np.array([1, 1, 3]), 3)  # region 2 empty
    with pytest.raises(DataError):
        AtlasPartition(np.array([0, 1]), 1)


def test_coordinate_table():
    t = CoordinateTable((3, 3, 3), np.array([[0, 0, 0], [1, 1, 1]]))
    assert t.flat_index().tolist() == [0, 13]
    with pytest.raises(DuplicateCoordinate):
        CoordinateTable((3, 3, 3), np.array([[0, 0, 0], [0, 0, 0]]))
    with pytest.raises(DataError):
        CoordinateTable((3, 3, 3), np.array([[3, 0, 0]]))


def test_subject_blocks_and_standardized(rng):
    X = rng.standard_normal((4, 20)) + 5
    s = SubjectData(X, AtlasPartition(np.array([1, 1, 2, 2]), 2))
    assert s.train.shape == (4, 16) and s.val.shape == (4, 2) and s.test_block().shape == (4, 2)
    z = s.standardized()
    assert np.abs(z.train.mean(axis=1)).max() < 1e-12
    with pytest.raises(DataError):
        SubjectData(X, AtlasPartition(np.array([1, 1, 2]), 2))
