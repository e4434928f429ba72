"""Shared domain types: subjects, temporal splits, atlas partitions, coordinates.

A subject is a voxel x time matrix.  All model fitting works on lag pairs
(column ``t-1`` predicts column ``t``) drawn from inside one split block, so
the three blocks never leak into each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    DataError,
    DuplicateCoordinate,
    EmptySubset,
    InvalidSplit,
    NonFiniteValue,
    ZeroVariance,
)

Array = NDArray[np.float64]


def check_timeseries(X) -> Array:
    """Validate and return ``X`` as a read-only float64 V x T matrix."""
    X = np.array(X, dtype=np.float64, order="C")
    if X.ndim != 2:
        raise DataError(f"time series matrix must be 2-D, got shape {X.shape}")
    V, T = X.shape
    if V < 1 or T < 3:
        raise DataError(f"need V >= 1 and T >= 3, got V={V}, T={T}")
    bad = np.flatnonzero(~np.isfinite(X.ravel()))
    if bad.size:
        raise NonFiniteValue(f"non-finite value at element index {int(bad[0])}")
    X.setflags(write=False)
    return X


@dataclass(frozen=True)
class TemporalSplit:
    """Contiguous train / validation / test blocks; test is the remainder."""

    train_end: int
    val_end: int

    @classmethod
    def default(cls, T: int, train_frac: float = 0.8, val_frac: float = 0.1) -> "TemporalSplit":
        train_end = math.floor(train_frac * T)
        val_end = train_end + math.floor(val_frac * T)
        return cls(train_end, val_end)

    def validate(self, T: int) -> None:
        if not 0 < self.train_end < self.val_end < T:
            raise InvalidSplit(
                f"need 0 < train_end < val_end < T, got {self.train_end}, {self.val_end}, T={T}"
            )

    def widths(self, T: int) -> tuple[int, int, int]:
        self.validate(T)
        return self.train_end, self.val_end - self.train_end, T - self.val_end


def split(X, policy: TemporalSplit | None = None) -> tuple[Array, Array, Array]:
    X = np.asarray(X)
    T = X.shape[1]
    policy = policy or TemporalSplit.default(T)
    policy.validate(T)
    return X[:, : policy.train_end], X[:, policy.train_end : policy.val_end], X[:, policy.val_end :]


def lag_pair(X, row_subset: Sequence[int], target_rows: Sequence[int] | None = None) -> tuple[Array, Array]:
    """Return ``(X_lagged, X_next)``.

    ``X_lagged`` holds columns ``0..T-2`` of ``row_subset``; ``X_next`` holds
    columns ``1..T-1`` of ``target_rows`` (defaults to ``row_subset``).
    """
    X = np.asarray(X)
    rows = np.asarray(row_subset, dtype=np.intp)
    if rows.size == 0:
        raise EmptySubset("row subset is empty")
    if X.shape[1] < 2:
        raise DataError("lag pairs need at least 2 time points")
    targets = rows if target_rows is None else np.asarray(target_rows, dtype=np.intp)
    if targets.size == 0:
        raise EmptySubset("target subset is empty")
    return X[rows, :-1], X[targets, 1:]


@dataclass(frozen=True)
class StandardizationStats:
    mean: Array
    std: Array | None = None

    def apply(self, X) -> Array:
        out = np.asarray(X, dtype=np.float64) - self.mean[:, None]
        if self.std is not None:
            out = out / self.std[:, None]
        return out


def fit_stats(train, scale: bool = False) -> StandardizationStats:
    train = np.asarray(train, dtype=np.float64)
    mean = train.mean(axis=1)
    if not scale:
        return StandardizationStats(mean)
    std = train.std(axis=1)
    const = np.flatnonzero(std == 0)
    if const.size:
        raise ZeroVariance(f"voxel {int(const[0])} is constant on the training block")
    return StandardizationStats(mean, std)


def standardize(X, stats: StandardizationStats) -> Array:
    return stats.apply(X)


@dataclass(frozen=True)
class AtlasPartition:
    labels: NDArray[np.int64]
    n_regions: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise DataError("atlas labels must be a non-empty 1-D array")
        if self.n_regions < 1:
            raise DataError("atlas needs at least one region")
        if labels.min() < 1 or labels.max() > self.n_regions:
            raise DataError(f"atlas labels must lie in 1..{self.n_regions}")
        counts = np.bincount(labels, minlength=self.n_regions + 1)[1:]
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise DataError(f"atlas region {int(empty[0]) + 1} has no voxels")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_voxels(self) -> int:
        return self.labels.size

    def regions(self) -> list[NDArray[np.intp]]:
        """Voxel indices of every region, ascending by region id."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels, minlength=self.n_regions + 1)[1:])
        return [np.sort(part) for part in np.split(order, bounds[:-1])]


@dataclass(frozen=True)
class CoordinateTable:
    grid_dims: tuple[int, int, int]
    coords: NDArray[np.int32]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.grid_dims)
        if len(dims) != 3 or min(dims) < 1:
            raise DataError(f"grid dims must be three positive integers, got {self.grid_dims}")
        coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        if coords.size and ((coords < 0).any() or (coords >= np.array(dims)).any()):
            raise DataError("voxel coordinate outside the grid")
        flat = np.ravel_multi_index(coords.T, dims) if coords.size else np.empty(0, np.intp)
        uniq, counts = np.unique(flat, return_counts=True)
        if (counts > 1).any():
            dup = np.unravel_index(uniq[counts > 1][0], dims)
            raise DuplicateCoordinate(f"coordinate {tuple(int(c) for c in dup)} used twice")
        coords.setflags(write=False)
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "coords", coords)

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    def flat_index(self) -> NDArray[np.intp]:
        return np.ravel_multi_index(self.coords.T.astype(np.intp), self.grid_dims)


@dataclass(frozen=True)
class SubjectData:
    """One subject's voxel x time matrix with its split and atlas.

    The test block is only reachable through :meth:`test_block`, which the
    selection code never calls; significance scoring is the sole consumer.
    """

    data: Array
    atlas: AtlasPartition
    split_policy: TemporalSplit = None  # type: ignore[assignment]
    coords: CoordinateTable | None = None
    name: str = "subject"
    stats: StandardizationStats | None = field(default=None, compare=False)

    def __post_init__(self):
        data = check_timeseries(self.data)
        object.__setattr__(self, "data", data)
        if self.split_policy is None:
            object.__setattr__(self, "split_policy", TemporalSplit.default(data.shape[1]))
        self.split_policy.validate(data.shape[1])
        if self.atlas.n_voxels != data.shape[0]:
            raise DataError(
                f"atlas has {self.atlas.n_voxels} voxels but data has {data.shape[0]} rows"
            )
        if self.coords is not None and self.coords.n_voxels != data.shape[0]:
            raise DataError(
                f"coordinate table has {self.coords.n_voxels} voxels but data has {data.shape[0]} rows"
            )

    @property
    def n_voxels(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]

    @property
    def train(self) -> Array:
        return self.data[:, : self.split_policy.train_end]

    @property
    def val(self) -> Array:
        return self.data[:, self.split_policy.train_end : self.split_policy.val_end]

    def test_block(self) -> Array:
        return self.data[:, self.split_policy.val_end :]

    def standardized(self, center: bool = True, scale: bool = False) -> "SubjectData":
        """Return a copy transformed with statistics fitted on the train block."""
        if not center and not scale:
            return self
        stats = fit_stats(self.train, scale=scale)
        if not center:
            stats = StandardizationStats(np.zeros_like(stats.mean), stats.std)
        return replace(self, data=stats.apply(self.data), stats=stats)
