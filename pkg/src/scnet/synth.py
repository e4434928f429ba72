"""Synthetic cohorts with planted ground truth.

Two generators:

* :func:`gen_var_subject` - sparse lag-1 dynamics ``x_t = A x_{t-1} + noise``
  where only a few driver voxels have nonzero columns in ``A``.
* :func:`gen_source_cohort` - subjects built from shared spatial maps with
  subject-specific time courses, the setting spatial ICA is meant to undo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data_model import AtlasPartition, CoordinateTable, SubjectData, TemporalSplit
from .errors import UnstableSpec

BURN_IN = 200


def cube_dims(n: int) -> tuple[int, int, int]:
    side = max(1, math.ceil(round(n ** (1.0 / 3.0), 9)))
    while side ** 3 < n:
        side += 1
    return side, side, side


def raster_coords(n: int, dims: tuple[int, int, int] | None = None) -> CoordinateTable:
    dims = dims or cube_dims(n)
    flat = np.arange(n)
    return CoordinateTable(dims, np.stack(np.unravel_index(flat, dims), axis=1))


def slab_atlas(n_voxels: int, n_regions: int) -> AtlasPartition:
    """Contiguous, nearly equal blocks of voxel indices."""
    labels = 1 + (np.arange(n_voxels) * n_regions) // n_voxels
    return AtlasPartition(labels, n_regions)


@dataclass
class PlantedVarSpec:
    V: int = 600
    T: int = 300
    n_regions: int = 10
    drivers: np.ndarray = None  # type: ignore[assignment]
    A: np.ndarray = None  # type: ignore[assignment]
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.A is None:
            self.A = np.zeros((self.V, self.V))
        if self.drivers is None:
            self.drivers = np.flatnonzero(np.abs(self.A).sum(axis=0))
        self.drivers = np.asarray(self.drivers, dtype=np.intp)

    @property
    def spectral_radius(self) -> float:
        if self.drivers.size == 0:
            return 0.0
        # Columns outside the driver set are zero, so A's spectrum is that of A[D, D].
        return float(np.abs(linalg.eigvals(self.A[np.ix_(self.drivers, self.drivers)])).max())


def make_var_spec(V: int = 600, T: int = 300, n_regions: int = 10, n_drivers: int = 5,
                  driven_fraction: float = 0.1, fan_in: int = 2, snr: float = 3.0,
                  driver_radius: float = 0.0, noise: float = 1.0, seed: int = 0) -> PlantedVarSpec:
    """Random sparse VAR(1) with a fixed per-target signal-to-noise ratio.

    Each driven voxel depends on ``fan_in`` drivers, scaled so that the
    variance of its predictable part is ``snr`` times the noise variance
    under the stationary driver covariance.  Every driver feeds at least one
    target.
    """
    rng = np.random.default_rng(seed)
    drivers = np.sort(rng.choice(V, size=n_drivers, replace=False))
    A = np.zeros((V, V))
    if n_drivers:
        B = rng.standard_normal((n_drivers, n_drivers))
        radius = np.abs(linalg.eigvals(B)).max()
        A[np.ix_(drivers, drivers)] = B * (driver_radius / radius if radius > 0 else 0.0)
        sigma = linalg.solve_discrete_lyapunov(A[np.ix_(drivers, drivers)], noise ** 2 * np.eye(n_drivers))
        others = np.setdiff1d(np.arange(V), drivers)
        n_driven = int(round(driven_fraction * others.size))
        driven = np.sort(rng.choice(others, size=n_driven, replace=False))
        k = min(fan_in, n_drivers)
        for i, j in enumerate(driven):
            if i < n_drivers:
                rest = np.delete(np.arange(n_drivers), i)
                pick = np.concatenate([[i], rng.choice(rest, size=k - 1, replace=False)])
            else:
                pick = rng.choice(n_drivers, size=k, replace=False)
            a = np.zeros(n_drivers)
            a[pick] = rng.standard_normal(k)
            a *= math.sqrt(snr * noise ** 2 / float(a @ sigma @ a))
            A[j, drivers] = a
    return PlantedVarSpec(V=V, T=T, n_regions=n_regions, drivers=drivers, A=A, noise=noise, seed=seed)


@dataclass
class VarTruth:
    drivers: np.ndarray
    A: np.ndarray

    @property
    def driven(self) -> np.ndarray:
        """Voxels whose future depends on at least one driver."""
        return np.flatnonzero(np.abs(self.A).sum(axis=1))


def simulate_var(A: np.ndarray, T: int, noise: float, rng: np.random.Generator,
                 burn_in: int = BURN_IN) -> np.ndarray:
    V = A.shape[0]
    x = np.zeros(V)
    out = np.empty((V, T))
    eps = rng.standard_normal((burn_in + T, V))
    for t in range(burn_in + T):
        x = A @ x + noise * eps[t]
        if t >= burn_in:
            out[:, t - burn_in] = x
    return out


def gen_var_subject(spec: PlantedVarSpec, name: str = "subject") -> tuple[SubjectData, VarTruth]:
    if spec.spectral_radius >= 1.0:
        raise UnstableSpec(f"spectral radius {spec.spectral_radius:.4f} >= 1")
    rng = np.random.default_rng([spec.seed, 1])
    X = simulate_var(spec.A, spec.T, spec.noise, rng)
    subject = SubjectData(X, slab_atlas(spec.V, spec.n_regions), TemporalSplit.default(spec.T),
                          raster_coords(spec.V), name)
    return subject, VarTruth(spec.drivers.copy(), spec.A.copy())


@dataclass
class PlantedSourceSpec:
    n_subjects: int = 5
    grid: tuple[int, int, int] = (20, 20, 20)
    n_sources: int = 5
    n_hidden: int = 1
    T: int = 200
    keep_fraction: float = 0.9
    blob_width: float = 2.5
    noise: float = 0.05
    distribution: str = "laplace"
    seed: int = 0


@dataclass
class SourceCohort:
    subjects: list[SubjectData]
    group_input: list[SubjectData]
    maps: np.ndarray            # (n_sources, n_cells) ground-truth maps on the flattened grid
    hidden: np.ndarray          # indices of sources absent from group_input
    grid: tuple[int, int, int]
    timecourses: list[np.ndarray] = field(default_factory=list)


def _source_values(rng, shape, distribution: str) -> np.ndarray:
    if distribution == "laplace":
        return rng.laplace(size=shape)
    if distribution == "gaussian":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown source distribution {distribution!r}")


def planted_maps(spec: PlantedSourceSpec, rng: np.random.Generator) -> np.ndarray:
    """Localised maps: heavy-tailed values under separated Gaussian envelopes."""
    dims = np.array(spec.grid)
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1).reshape(-1, 3)
    margin = np.minimum(dims // 4, np.ceil(spec.blob_width)).astype(int)
    centers: list[np.ndarray] = []
    min_sep = 2.5 * spec.blob_width
    for _ in range(spec.n_sources):
        for _attempt in range(1000):
            c = rng.integers(margin, dims - margin)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                break
        centers.append(c)
    maps = np.empty((spec.n_sources, grid.shape[0]))
    for k, c in enumerate(centers):
        env = np.exp(-((grid - c) ** 2).sum(axis=1) / (2.0 * spec.blob_width ** 2))
        maps[k] = env * np.abs(_source_values(rng, grid.shape[0], spec.distribution))
    return maps


def gen_source_cohort(spec: PlantedSourceSpec) -> SourceCohort:
    """Subjects sharing spatial maps; each has its own time courses and voxel subset.

    ``group_input`` holds the same subjects with the last ``n_hidden``
    sources removed, standing in for a group analysis that never sees them.
    """
    rng = np.random.default_rng([spec.seed, 2])
    maps = planted_maps(spec, rng)
    n_cells = maps.shape[1]
    hidden = np.arange(spec.n_sources - spec.n_hidden, spec.n_sources)
    visible = np.ones(spec.n_sources, dtype=bool)
    visible[hidden] = False
    subjects, group_input, tcs = [], [], []
    for s in range(spec.n_subjects):
        keep = np.sort(rng.choice(n_cells, size=int(round(spec.keep_fraction * n_cells)), replace=False))
        coords = CoordinateTable(spec.grid, np.stack(np.unravel_index(keep, spec.grid), axis=1))
        tc = rng.standard_normal((spec.n_sources, spec.T))
        noise = spec.noise * rng.standard_normal((keep.size, spec.T))
        local = maps[:, keep].T
        atlas = slab_atlas(keep.size, min(10, keep.size))
        data = local @ tc + noise
        data_group = local[:, visible] @ tc[visible] + noise
        name = f"sub-{s + 1:02d}"
        subjects.append(SubjectData(data, atlas, None, coords, name))
        group_input.append(SubjectData(data_group, atlas, None, coords, name))
        tcs.append(tc)
    return SourceCohort(subjects, group_input, maps, hidden, tuple(spec.grid), tcs)
