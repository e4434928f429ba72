"""Common-space comparison of spatial maps: grid projection, Gaussian blur,
absolute cosine similarity, inter-subject (IS) and individual-group (IGS)
profiles, the dominance test, and weighted agglomerative clustering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data_model import CoordinateTable
from .errors import DimensionMismatch, MaskMismatch, TooFewProfiles, ZeroNorm


# -- grid and blur --------------------------------------------------------------

def project_to_grid(values: np.ndarray, coords: CoordinateTable) -> np.ndarray:
    """Scatter one value per voxel into its grid cell; other cells are 0."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != coords.n_voxels:
        raise DimensionMismatch(f"{values.size} values for {coords.n_voxels} coordinates")
    vol = np.zeros(coords.grid_dims)
    c = coords.coords
    vol[c[:, 0], c[:, 1], c[:, 2]] = values
    return vol


def gather(volume: np.ndarray, coords: CoordinateTable) -> np.ndarray:
    """Inverse of :func:`project_to_grid`: read the cells listed in ``coords``."""
    if tuple(volume.shape) != tuple(coords.grid_dims):
        raise MaskMismatch(f"volume {volume.shape} does not match grid {coords.grid_dims}")
    c = coords.coords
    return volume[c[:, 0], c[:, 1], c[:, 2]]


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalised 1-D Gaussian of half-width ``radius`` (default ``ceil(3 sigma)``)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3.0 * sigma) if radius is None else int(radius)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur3d(volume: np.ndarray, sigma: float = 3.0, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with zero padding outside the volume."""
    k = gaussian_kernel(sigma, radius)
    out = np.asarray(volume, dtype=np.float64)
    for axis in range(out.ndim):
        out = ndimage.convolve1d(out, k, axis=axis, mode="constant", cval=0.0)
    return out


def common_space(Q: np.ndarray, coords: CoordinateTable, mask: CoordinateTable,
                 sigma: float = 3.0, radius: int | None = None) -> np.ndarray:
    """Blurred maps restricted to ``mask``.

    ``Q`` holds one map per column (V x K); the result has one blurred map per
    row (K x n_mask), with every cell outside the mask dropped.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[:, None]
    if coords.grid_dims != mask.grid_dims:
        raise MaskMismatch(f"grid {coords.grid_dims} differs from mask grid {mask.grid_dims}")
    return np.stack([gather(blur3d(project_to_grid(q, coords), sigma, radius), mask) for q in Q.T]) \
        if Q.shape[1] else np.zeros((0, mask.n_voxels))


# -- cosine similarity ----------------------------------------------------------

def cossim_abs(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DimensionMismatch(f"maps have {a.size} and {b.size} cells")
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0.0 or bb == 0.0:
        raise ZeroNorm("cosine similarity of a zero map")
    return min(1.0, abs(float(a @ b)) / math.sqrt(aa * bb))


def abs_cosine_matrix(A: np.ndarray) -> np.ndarray:
    """All-pairs absolute cosine similarity of the rows of ``A``.

    ``|G_ij| / sqrt(G_ii G_jj)`` from one Gram matrix; the diagonal is exactly
    1 because ``sqrt(x * x) == x`` in IEEE arithmetic.
    """
    A = np.asarray(A, dtype=np.float64)
    G = A @ A.T
    d = np.diag(G).copy()
    if np.any(d == 0.0):
        raise ZeroNorm(f"map {int(np.flatnonzero(d == 0.0)[0])} has zero norm")
    C = np.abs(G) / np.sqrt(d[:, None] * d[None, :])
    return np.minimum(C, 1.0)


def canonical_maps(maps: np.ndarray) -> np.ndarray:
    """Sign- and order-normalised copy of a (K x N) map stack.

    Each map is flipped so that its largest-magnitude cell is positive, then
    the maps are sorted lexicographically, so any sign flip or reordering of
    the input gives bit-identical output.
    """
    M = np.array(maps, dtype=np.float64, copy=True)
    if M.shape[0] == 0:
        return M
    sign = np.sign(M[np.arange(M.shape[0]), np.abs(M).argmax(axis=1)])
    M *= np.where(sign == 0, 1.0, sign)[:, None]
    order = np.lexsort(M.T[::-1])
    return M[order]


# -- profiles -------------------------------------------------------------------

@dataclass
class SimilarityProfiles:
    """IS/IGS profiles for every subject IC, one row per IC."""

    owner: np.ndarray       # (n,) subject index of each IC
    component: np.ndarray   # (n,) component index within its subject
    IS: np.ndarray          # (n, |S|) inter-subject similarity, self entry 1
    IGS: np.ndarray         # (n,) individual-group similarity
    is_match: np.ndarray    # (n, |S|) best-matching component in each subject
    igs_match: np.ndarray   # (n,) best-matching group component
    subjects: list[str]

    @property
    def n_subjects(self) -> int:
        return self.IS.shape[1]

    def features(self) -> np.ndarray:
        return np.column_stack([self.IS, self.IGS])


def similarity_profiles(subject_maps: list[np.ndarray], group_maps: np.ndarray,
                        subjects: list[str] | None = None) -> SimilarityProfiles:
    """IS and IGS for every subject IC.

    All maps must already live in the same (blurred, masked) common space:
    ``subject_maps[s]`` is K_s x N and ``group_maps`` K_g x N.  Maxima break
    ties toward the smallest component index.
    """
    if not subject_maps:
        raise TooFewProfiles("no subjects")
    N = group_maps.shape[1]
    for s, m in enumerate(subject_maps):
        if m.ndim != 2 or m.shape[1] != N:
            raise DimensionMismatch(f"subject {s} maps have shape {m.shape}, expected (K, {N})")
    sizes = [m.shape[0] for m in subject_maps]
    if min(sizes) == 0 or group_maps.shape[0] == 0:
        raise TooFewProfiles("every subject and the group need at least one component")
    C = abs_cosine_matrix(np.vstack(list(subject_maps) + [group_maps]))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    n = int(bounds[-1])
    nS = len(subject_maps)
    IS = np.empty((n, nS))
    is_match = np.empty((n, nS), dtype=np.intp)
    for s in range(nS):
        block = C[:n, bounds[s]:bounds[s + 1]]
        is_match[:, s] = block.argmax(axis=1)
        IS[:, s] = block[np.arange(n), is_match[:, s]]
    gblock = C[:n, n:]
    igs_match = gblock.argmax(axis=1)
    IGS = gblock[np.arange(n), igs_match]
    owner = np.repeat(np.arange(nS), sizes)
    component = np.concatenate([np.arange(k) for k in sizes])
    if not np.all(IS[np.arange(n), owner] == 1.0):
        raise AssertionError("self similarity is not exactly 1")
    names = subjects or [f"sub-{s + 1:02d}" for s in range(nS)]
    return SimilarityProfiles(owner, component, IS, IGS, is_match, igs_match, list(names))


def dominance_test(is_values: np.ndarray, igs: float, owner: int) -> bool:
    """True if ``IS > IGS`` strictly for at least half of the other subjects."""
    others = np.delete(np.asarray(is_values), owner)
    if others.size == 0:
        return False
    return int((others > igs).sum()) >= math.ceil(others.size / 2)


@dataclass
class DominanceSummary:
    ic_pass: np.ndarray          # (n,) per-IC flag
    subject_fraction: np.ndarray  # (|S|,) fraction of each subject's ICs passing
    subject_pass: np.ndarray      # (|S|,) fraction >= 0.5

    @property
    def n_failed_subjects(self) -> int:
        return int((~self.subject_pass).sum())


def dominance_summary(p: SimilarityProfiles) -> DominanceSummary:
    flags = np.array([dominance_test(p.IS[i], p.IGS[i], p.owner[i]) for i in range(p.owner.size)], dtype=bool)
    frac = np.array([flags[p.owner == s].mean() for s in range(p.n_subjects)])
    return DominanceSummary(flags, frac, frac >= 0.5)


# -- clustering -----------------------------------------------------------------

LINKAGES = ("weighted", "average", "single", "complete")
METRICS = ("manhattan", "euclidean")


def profile_distances(IS: np.ndarray, IGS: np.ndarray, metric: str = "manhattan",
                      igs_weight: float | None = None) -> np.ndarray:
    """Square distance matrix between profiles.

    Manhattan: ``sum_i |IS_i - IS'_i| + w |IGS - IGS'|`` with ``w = |S|`` by
    default; the Euclidean variant applies the same weight to the squared IGS
    difference.
    """
    IS = np.atleast_2d(np.asarray(IS, dtype=np.float64))
    IGS = np.asarray(IGS, dtype=np.float64).ravel()
    w = float(IS.shape[1]) if igs_weight is None else float(igs_weight)
    dis = IS[:, None, :] - IS[None, :, :]
    dig = IGS[:, None] - IGS[None, :]
    if metric == "manhattan":
        return np.abs(dis).sum(axis=2) + w * np.abs(dig)
    if metric == "euclidean":
        return np.sqrt((dis * dis).sum(axis=2) + w * dig * dig)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def agglomerate(D: np.ndarray, method: str = "weighted") -> np.ndarray:
    """Agglomerative clustering by Lance-Williams updates.

    Returns a linkage matrix in the usual ``(n-1) x 4`` layout: merged ids,
    height, size; new clusters get ids ``n, n+1, ...``.  Among equally close
    pairs the one with the smallest ``(i, j)`` cluster ids merges first.
    """
    if method not in LINKAGES:
        raise ValueError(f"unknown linkage {method!r}; choose from {LINKAGES}")
    n = D.shape[0]
    dist = np.array(D, dtype=np.float64, copy=True)
    np.fill_diagonal(dist, np.inf)
    ids = list(range(n))
    sizes = [1] * n
    alive = np.ones(n, dtype=bool)
    Z = np.zeros((max(n - 1, 0), 4))
    for step in range(n - 1):
        sub = np.where(alive[:, None] & alive[None, :], dist, np.inf)
        h = sub.min()
        cand = np.argwhere(sub == h)
        cand = cand[cand[:, 0] < cand[:, 1]]
        # smallest pair of cluster ids, not slot indices
        keys = [tuple(sorted((ids[a], ids[b]))) for a, b in cand]
        a, b = cand[min(range(len(keys)), key=keys.__getitem__)]
        ia, ib = sorted((ids[a], ids[b]))
        na, nb = sizes[a], sizes[b]
        Z[step] = (ia, ib, h, na + nb)
        da, db = dist[a], dist[b]
        if method == "weighted":
            new = 0.5 * (da + db)
        elif method == "average":
            new = (na * da + nb * db) / (na + nb)
        elif method == "single":
            new = np.minimum(da, db)
        else:
            new = np.maximum(da, db)
        dist[a, :] = new
        dist[:, a] = new
        dist[a, a] = np.inf
        alive[b] = False
        dist[b, :] = np.inf
        dist[:, b] = np.inf
        ids[a] = n + step
        sizes[a] = na + nb
    return Z


def cut_linkage(Z: np.ndarray, n: int, n_clusters: int) -> np.ndarray:
    """Flat labels ``1..n_clusters`` from the first ``n - n_clusters`` merges.

    Labels are numbered by the smallest member index of each cluster.
    """
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    rep = list(range(n)) + [0] * max(n - 1, 0)
    for step in range(n - n_clusters):
        a, b = int(Z[step, 0]), int(Z[step, 1])
        ra, rb = find(rep[a]), find(rep[b])
        parent[max(ra, rb)] = min(ra, rb)
        rep[n + step] = min(ra, rb)
    roots = np.array([find(i) for i in range(n)])
    _, first = np.unique(roots, return_index=True)
    order = {r: k + 1 for k, r in enumerate(roots[np.sort(first)])}
    return np.array([order[r] for r in roots], dtype=np.intp)


@dataclass
class ClusterResult:
    linkage: np.ndarray     # (n-1, 4), in the caller's profile order
    labels: np.ndarray      # (n,) 1..n_clusters
    n_clusters: int
    mean_is: np.ndarray     # (n_clusters,)
    mean_igs: np.ndarray    # (n_clusters,)
    candidate: int          # label with the largest mean IS - mean IGS

    @property
    def heights(self) -> np.ndarray:
        return self.linkage[:, 2]


def cluster_features(IS: np.ndarray, IGS: np.ndarray, n_clusters: int = 4, metric: str = "manhattan",
                     method: str = "weighted", igs_weight: float | None = None) -> ClusterResult:
    """Cluster (IS, IGS) profiles and flag the high-IS / low-IGS cluster.

    Profiles are first put in lexicographic order so the result does not
    depend on the order they were supplied in; labels and the linkage are
    reported against the original order.
    """
    IS = np.atleast_2d(np.asarray(IS, dtype=np.float64))
    IGS = np.asarray(IGS, dtype=np.float64).ravel()
    n = IS.shape[0]
    if n_clusters < 1 or n < n_clusters:
        raise TooFewProfiles(f"{n} profiles cannot form {n_clusters} clusters")
    feats = np.column_stack([IS, IGS])
    order = np.lexsort(feats.T[::-1])
    D = profile_distances(IS[order], IGS[order], metric, igs_weight)
    Z = agglomerate(D, method)
    sorted_labels = cut_linkage(Z, n, n_clusters)
    labels = np.empty(n, dtype=np.intp)
    labels[order] = sorted_labels
    # renumber by smallest original index
    _, first = np.unique(labels, return_index=True)
    remap = {lab: k + 1 for k, lab in enumerate(labels[np.sort(first)])}
    labels = np.array([remap[x] for x in labels], dtype=np.intp)
    # express the linkage leaves in the caller's order
    Zo = Z.copy()
    for col in (0, 1):
        leaf = Zo[:, col] < n
        Zo[leaf, col] = order[Zo[leaf, col].astype(np.intp)]
    # means summed in sorted order so they do not depend on the input order
    lab_sorted = labels[order]
    mean_is = np.array([IS[order][lab_sorted == c].mean() for c in range(1, n_clusters + 1)])
    mean_igs = np.array([IGS[order][lab_sorted == c].mean() for c in range(1, n_clusters + 1)])
    candidate = int(np.argmax(mean_is - mean_igs)) + 1
    return ClusterResult(Zo, labels, n_clusters, mean_is, mean_igs, candidate)


def cluster_profiles(p: SimilarityProfiles, n_clusters: int = 4, metric: str = "manhattan",
                     method: str = "weighted") -> ClusterResult:
    return cluster_features(p.IS, p.IGS, n_clusters, metric, method)
