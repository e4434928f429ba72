"""Per-subject network analysis and cohort comparison.

A subject's selected voxels are decomposed by spatial ICA, the sources are
extended to every voxel through the final ridge model, and the resulting
maps are compared across subjects and against group-level maps in a shared
grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data_model import CoordinateTable, SubjectData
from .errors import EmptySubset
from .ica import GroupMaps, IcaDecomposition, IcaOptions, backproject, canonicalize, fastica, numerical_rank, union_mask
from .selection import Stage2Result
from .similarity import SimilarityProfiles, common_space, similarity_profiles

logger = logging.getLogger(__name__)


@dataclass
class SubjectNetwork:
    name: str
    voxels: np.ndarray          # voxels entering the ICA
    decomposition: IcaDecomposition
    Q: np.ndarray               # (V, K) whole-cortex maps
    coords: CoordinateTable | None = None

    @property
    def n_components(self) -> int:
        return self.Q.shape[1]


def ica_input(subject: SubjectData, voxels: np.ndarray, block: str = "train") -> np.ndarray:
    """``T x |voxels|`` matrix handed to spatial ICA."""
    if block == "train":
        X = subject.train
    elif block == "all":
        X = subject.data
    else:
        raise ValueError(f"unknown ICA block {block!r}")
    return X[voxels].T


def subject_network(subject: SubjectData, stage2: Stage2Result | None, n_components: int = 20,
                    seed: int = 0, opts: IcaOptions | None = None, block: str = "train",
                    voxels: str = "selected") -> SubjectNetwork:
    """ICA on a standardised subject and back-projection to all voxels.

    With ``voxels="selected"`` the ICA sees the stage-2 voxel set and maps are
    extended through the ridge coefficients.  ``voxels="all"`` skips the
    selection: every voxel enters and the extension is the identity.  The
    component count is capped at the numerical rank of the input.
    """
    V = subject.n_voxels
    if voxels == "all":
        sel = np.arange(V)
        coef = None
    elif voxels == "selected":
        if stage2 is None or stage2.selected.size == 0:
            raise EmptySubset(f"{subject.name}: no selected voxels for ICA")
        sel = stage2.selected
        rows = np.searchsorted(stage2.s1_voxels, sel)
        coef = stage2.ridge_W[rows].T
    else:
        raise ValueError(f"unknown voxel set {voxels!r}")
    data = ica_input(subject, sel, block)
    opts = opts or IcaOptions()
    K = min(n_components, numerical_rank(data, opts.rank_rtol))
    if K < 1:
        raise EmptySubset(f"{subject.name}: ICA input has rank 0")
    if K < n_components:
        logger.info("%s: using %d components (input rank)", subject.name, K)
    dec = canonicalize(fastica(data, K, seed, opts))
    Q = dec.S.T.copy() if coef is None else backproject(coef, dec.S)
    return SubjectNetwork(subject.name, sel, dec, Q, subject.coords)


def cohort_profiles(networks: list[SubjectNetwork], group: GroupMaps, sigma: float = 3.0,
                    radius: int | None = None) -> SimilarityProfiles:
    """Blur every subject and group map into the common grid and build IS/IGS profiles."""
    tables = [n.coords for n in networks]
    if any(t is None for t in tables):
        raise EmptySubset("every subject needs a coordinate table")
    mask = union_mask(tables + [group.coords])
    subject_maps = [common_space(n.Q, n.coords, mask, sigma, radius) for n in networks]
    group_maps = common_space(group.maps.T, group.coords, mask, sigma, radius)
    return similarity_profiles(subject_maps, group_maps, [n.name for n in networks])
