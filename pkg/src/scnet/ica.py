"""Spatial FastICA, back-projection to whole-cortex maps, and a
concatenation group-ICA baseline.

Data are arranged as ``T x N`` (time points x voxels).  Each of the ``T``
rows is one mixture observed over ``N`` voxel samples, so the recovered
sources are spatial: ``data ~= M S`` with ``M`` (T x K) the time courses and
``S`` (K x N) the maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data_model import CoordinateTable
from .errors import DimensionMismatch, MaskMismatch, RankDeficient

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcaOptions:
    max_iter: int = 1000
    tol: float = 1e-6
    alpha: float = 1.0
    rank_rtol: float = 1e-12


@dataclass
class IcaDecomposition:
    M: np.ndarray          # (T, K) mixing matrix
    S: np.ndarray          # (K, N) sources, unit variance, uncorrelated
    mean: np.ndarray       # (T,) per-mixture mean removed before whitening
    whitening: np.ndarray  # (K, T)
    unmixing: np.ndarray   # (K, K) orthogonal rotation applied to whitened data
    n_iter: int
    converged: bool

    @property
    def n_components(self) -> int:
        return self.S.shape[0]


def whiten(data: np.ndarray, K: int, rank_rtol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Center mixtures and project onto the top-``K`` principal directions.

    Returns ``(Z, mean, whitening, evals, evecs)`` with ``Z Z^T / N = I``.
    """
    X = np.asarray(data, dtype=np.float64)
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    N = X.shape[1]
    cov = Xc @ Xc.T / N
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if evals.size else 0.0
    usable = int((evals > rank_rtol * top).sum()) if top > 0 else 0
    if usable < K:
        raise RankDeficient(f"covariance has {usable} eigenvalues above {rank_rtol:g} x max, need {K}")
    evals, evecs = evals[:K], evecs[:, :K]
    # Fix eigenvector signs so whitening does not depend on the eigensolver's choice.
    flip = np.sign(evecs[np.abs(evecs).argmax(axis=0), np.arange(K)])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    whitening = (evecs / np.sqrt(evals)).T
    return whitening @ Xc, mean, whitening, evals, evecs


def symmetric_decorrelation(W: np.ndarray) -> np.ndarray:
    """``(W W^T)^{-1/2} W``."""
    s, u = np.linalg.eigh(W @ W.T)
    s = np.clip(s, np.finfo(float).tiny, None)
    return (u / np.sqrt(s)) @ u.T @ W


def fastica(data, K: int, seed: int = 0, opts: IcaOptions | None = None) -> IcaDecomposition:
    """Symmetric fixed-point FastICA with the logcosh contrast.

    ``g(u) = tanh(alpha u)``, ``g'(u) = alpha (1 - tanh^2(alpha u))``.  The
    initial unmixing matrix is drawn from a seeded standard normal and
    orthonormalised, so a given seed reproduces the result bit for bit.
    Iteration stops when ``max |1 - |<w_new, w_old>|| < tol``; a run that
    exhausts ``max_iter`` is returned with ``converged=False``.
    """
    opts = opts or IcaOptions()
    X = np.asarray(data, dtype=np.float64)
    T, N = X.shape
    if K < 1 or K > min(T, N):
        raise DimensionMismatch(f"need 1 <= K <= min(T, N) = {min(T, N)}, got K={K}")
    if not np.isfinite(X).all():
        raise ValueError("ICA input must be finite")
    Z, mean, whitening, evals, evecs = whiten(X, K, opts.rank_rtol)
    rng = np.random.default_rng(seed)
    W = symmetric_decorrelation(rng.standard_normal((K, K)))
    a = opts.alpha
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        U = W @ Z
        g = np.tanh(a * U)
        g_prime = a * (1.0 - g * g)
        W_new = symmetric_decorrelation(g @ Z.T / N - g_prime.mean(axis=1)[:, None] * W)
        lim = np.max(np.abs(1.0 - np.abs(np.einsum("ij,ij->i", W_new, W))))
        W = W_new
        if lim < opts.tol:
            converged = True
            break
    if not converged:
        logger.warning("FastICA did not converge in %d iterations", opts.max_iter)
    S = W @ Z
    M = (evecs * np.sqrt(evals)) @ W.T
    return IcaDecomposition(M=M, S=S, mean=mean, whitening=whitening, unmixing=W, n_iter=it,
                            converged=converged)


def canonicalize(dec: IcaDecomposition) -> IcaDecomposition:
    """Order components by decreasing mixing-column norm and make the
    largest-magnitude entry of each source positive."""
    order = np.argsort(-np.linalg.norm(dec.M, axis=0), kind="stable")
    S = dec.S[order]
    M = dec.M[:, order]
    sign = np.sign(S[np.arange(S.shape[0]), np.abs(S).argmax(axis=1)])
    sign[sign == 0] = 1.0
    return IcaDecomposition(M=M * sign, S=S * sign[:, None], mean=dec.mean, whitening=dec.whitening,
                            unmixing=dec.unmixing[order] * sign[:, None], n_iter=dec.n_iter,
                            converged=dec.converged)


def match_components(estimated: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best |correlation| of each true source (rows) with any estimated source.

    Returns ``(best_abs_corr, best_index)``, one entry per true source.
    """
    C = np.corrcoef(np.vstack([truth, estimated]))[: truth.shape[0], truth.shape[0]:]
    C = np.abs(np.nan_to_num(C))
    return C.max(axis=1), C.argmax(axis=1)


def backproject(coef: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Whole-cortex spatial maps ``Q = coef S^T``.

    ``coef`` maps the selected voxels to every voxel (V x |selected|), i.e. the
    final ridge coefficients transposed and restricted to the selected rows.
    """
    coef = np.asarray(coef, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if coef.shape[1] != S.shape[1]:
        raise DimensionMismatch(f"coefficients cover {coef.shape[1]} voxels, sources cover {S.shape[1]}")
    return coef @ S.T


@dataclass
class GroupMaps:
    maps: np.ndarray             # (K, n_mask)
    coords: CoordinateTable      # grid positions of the mask voxels, in column order

    @property
    def n_components(self) -> int:
        return self.maps.shape[0]


def union_mask(tables: list[CoordinateTable]) -> CoordinateTable:
    """Sorted union of several subjects' grid cells."""
    dims = tables[0].grid_dims
    for t in tables[1:]:
        if t.grid_dims != dims:
            raise MaskMismatch(f"grid {t.grid_dims} differs from {dims}")
    flat = np.unique(np.concatenate([t.flat_index() for t in tables]))
    return CoordinateTable(dims, np.stack(np.unravel_index(flat, dims), axis=1))


def to_mask_columns(values: np.ndarray, coords: CoordinateTable, mask: CoordinateTable) -> np.ndarray:
    """Scatter (rows x V) values into (rows x n_mask) columns of ``mask``; missing cells are 0."""
    if coords.grid_dims != mask.grid_dims:
        raise MaskMismatch(f"grid {coords.grid_dims} differs from {mask.grid_dims}")
    mflat = mask.flat_index()
    pos = np.searchsorted(mflat, coords.flat_index())
    if np.any(pos >= mflat.size) or np.any(mflat[np.minimum(pos, mflat.size - 1)] != coords.flat_index()):
        raise MaskMismatch("subject voxels fall outside the group mask")
    out = np.zeros((values.shape[0], mflat.size))
    out[:, pos] = values
    return out


def group_ica_baseline(series: list[np.ndarray], coords: list[CoordinateTable], K: int, seed: int = 0,
                       subject_components: int | None = None, opts: IcaOptions | None = None) -> GroupMaps:
    """Temporal-concatenation group ICA on the union mask.

    Each subject's ``V_s x T`` series is placed on the common mask; with
    ``subject_components`` set it is first reduced to that many principal
    components (scaled by their singular values).  The stacked matrix is
    then decomposed by :func:`fastica` and the sources are the group maps.
    """
    if not series:
        raise ValueError("group ICA needs at least one subject")
    mask = union_mask(coords)
    blocks = []
    for X, c in zip(series, coords):
        D = to_mask_columns(np.asarray(X, dtype=np.float64).T, c, mask)
        if subject_components is not None:
            D = D - D.mean(axis=1, keepdims=True)
            U, s, Vt = np.linalg.svd(D, full_matrices=False)
            r = min(subject_components, s.size)
            D = s[:r, None] * Vt[:r]
        blocks.append(D)
    stacked = np.vstack(blocks)
    rank = numerical_rank(stacked, (opts or IcaOptions()).rank_rtol)
    if rank < K:
        logger.info("group ICA: using %d components (input rank)", rank)
        K = rank
    dec = canonicalize(fastica(stacked, K, seed, opts))
    return GroupMaps(dec.S, mask)


def numerical_rank(data: np.ndarray, rank_rtol: float = 1e-12) -> int:
    """Number of mixture-covariance eigenvalues above ``rank_rtol`` x the largest."""
    X = np.asarray(data, dtype=np.float64)
    Xc = X - X.mean(axis=1, keepdims=True)
    ev = np.linalg.eigvalsh(Xc @ Xc.T / max(X.shape[1], 1))
    top = ev.max(initial=0.0)
    return int((ev > rank_rtol * top).sum()) if top > 0 else 0
