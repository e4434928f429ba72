"""Per-target LASSO by cyclic coordinate descent, and ridge regression
restricted to a given support.

Targets that share a predictor matrix are solved together: coordinate
descent runs on the Gram matrix ``G = X X^T`` with one column of
coefficients per target.  Columns never interact, so each target follows
exactly the update sequence it would follow alone and stops on its own
convergence test.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, SingularSystem
from .l21 import lambda_path
from .linalg import spd_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LassoOptions:
    max_sweeps: int = 1000
    tol: float = 1e-9


@dataclass(frozen=True)
class LassoProblem:
    y: np.ndarray
    X: np.ndarray
    lam: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if X.shape[1] != y.size:
            raise DimensionMismatch(f"y has {y.size} time points, X has {X.shape[1]}")
        if not (np.isfinite(y).all() and np.isfinite(X).all()):
            raise ValueError("problem data must be finite")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)


@dataclass
class SparseVectorSolution:
    w: np.ndarray
    support: np.ndarray
    kkt_residual: float = float("nan")
    converged: bool = True
    sweeps: int = 0
    penalty: float = 0.0
    val_mse: float = float("nan")
    objective_trace: list[float] = field(default_factory=list)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(y, X, w, lam) -> float:
    r = np.asarray(y) - np.asarray(X).T @ np.asarray(w)
    return float(r @ r + lam * np.abs(w).sum())


def lasso_lambda_max(y, X) -> float:
    """``2 max_j |<x_j, y>|``: the smallest penalty with an all-zero solution."""
    c = np.atleast_2d(X) @ np.asarray(y, dtype=np.float64).ravel()
    return float(2.0 * np.abs(c).max()) if c.size else 0.0


def lasso_kkt(y, X, w, lam) -> float:
    """Largest optimality violation, relative to ``lam``.

    Zero coefficients need ``|2 <x_j, r>| <= lam``; nonzero ones need
    ``2 <x_j, r> = -lam sign(w_j)`` with ``r = X^T w - y``.
    """
    X = np.atleast_2d(X)
    grad = 2.0 * X @ (X.T @ w - np.asarray(y).ravel())
    nz = w != 0
    viol_zero = np.maximum(np.abs(grad[~nz]) - lam, 0.0)
    viol_nz = np.abs(grad[nz] + lam * np.sign(w[nz]))
    worst = max(viol_zero.max(initial=0.0), viol_nz.max(initial=0.0))
    return worst / lam if lam > 0 else worst


def coordinate_descent(G: np.ndarray, C: np.ndarray, lams: np.ndarray, W: np.ndarray,
                       tol_abs: np.ndarray, max_sweeps: int, yy: np.ndarray | None = None,
                       trace: list[float] | None = None, polish_every: int = 20) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cyclic coordinate descent for many targets sharing one Gram matrix.

    Parameters
    ----------
    G : (p, p) Gram matrix of the predictors.
    C : (p, q) predictor/target cross products, one column per target.
    lams : (q,) penalty per target.
    W : (p, q) starting coefficients (modified copy is returned).
    tol_abs : (q,) stop once a full sweep moves no coordinate more than this.
    polish_every : every this many sweeps, targets still running try the
        exact sign-fixed solution of their current support (0 disables).

    Returns the coefficients, the sweeps used and a converged mask per target.
    """
    W = np.array(W, dtype=np.float64, copy=True)
    p, q = W.shape
    diag = np.diag(G).copy()
    half = 0.5 * np.asarray(lams, dtype=np.float64)
    sweeps = np.zeros(q, dtype=np.int64)
    live = np.ones(q, dtype=bool)
    for it in range(1, max_sweeps + 1):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        Wl = W[:, idx]
        Cl = C[:, idx]
        GW = G @ Wl
        moved = np.zeros(idx.size)
        for k in range(p):
            if diag[k] <= 0.0:
                continue
            old = Wl[k].copy()
            rho = Cl[k] - GW[k] + diag[k] * old
            new = soft_threshold(rho, half[idx]) / diag[k]
            delta = new - old
            if np.any(delta):
                GW += np.outer(G[:, k], delta)
                Wl[k] = new
                np.maximum(moved, np.abs(delta), out=moved)
        W[:, idx] = Wl
        sweeps[idx] += 1
        if trace is not None and yy is not None:
            w = W[:, 0]
            trace.append(float(yy[0] - 2.0 * C[:, 0] @ w + w @ G @ w + lams[0] * np.abs(w).sum()))
        live[idx[moved <= tol_abs[idx]]] = False
        if polish_every and it % polish_every == 0:
            for j in np.flatnonzero(live):
                w = _sign_fixed_solution(G, C[:, j], lams[j], W[:, j])
                if w is not None:
                    W[:, j] = w
                    live[j] = False
    return W, sweeps, ~live


def _sign_fixed_solution(G: np.ndarray, c: np.ndarray, lam: float, w: np.ndarray,
                         rtol: float = 1e-9) -> np.ndarray | None:
    """Exact minimiser for the current support and signs, if it is optimal.

    Coordinate descent identifies the support long before the coefficients
    settle on ill-conditioned designs.  With support ``S`` and signs ``s``
    fixed the optimum solves ``G_SS w_S = c_S - (lam/2) s``; the candidate is
    returned only when it keeps those signs and satisfies the KKT conditions
    off the support.
    """
    S = np.flatnonzero(w)
    if S.size == 0:
        return None
    s = np.sign(w[S])
    try:
        wS = spd_solve(G[np.ix_(S, S)], c[S] - 0.5 * lam * s)
    except SingularSystem:
        return None
    if np.any(np.sign(wS) != s):
        return None
    out = np.zeros_like(w)
    out[S] = wS
    grad = c - G[:, S] @ wS
    grad[S] = 0.0
    if np.abs(grad).max() > 0.5 * lam * (1.0 + rtol):
        return None
    return out


def solve_lasso(problem: LassoProblem, opts: LassoOptions | None = None,
                w0: np.ndarray | None = None) -> SparseVectorSolution:
    opts = opts or LassoOptions()
    y, X, lam = problem.y, problem.X, float(problem.lam)
    G = X @ X.T
    C = (X @ y)[:, None]
    W0 = np.zeros((X.shape[0], 1)) if w0 is None else np.asarray(w0, dtype=np.float64).reshape(-1, 1)
    tol = np.array([opts.tol * float(np.linalg.norm(y))])
    trace: list[float] = []
    W, sweeps, conv = coordinate_descent(G, C, np.array([lam]), W0, tol, opts.max_sweeps,
                                         yy=np.array([y @ y]), trace=trace)
    w = W[:, 0]
    if not conv[0]:
        logger.warning("coordinate descent did not converge in %d sweeps (lam=%g)", opts.max_sweeps, lam)
    return SparseVectorSolution(w=w, support=np.flatnonzero(w), kkt_residual=lasso_kkt(y, X, w, lam),
                                converged=bool(conv[0]), sweeps=int(sweeps[0]), penalty=lam,
                                objective_trace=trace)


def _support_groups(masks: np.ndarray) -> dict[bytes, np.ndarray]:
    """Group target columns by identical support pattern (rows of ``masks.T``)."""
    groups: dict[bytes, list[int]] = {}
    for j, col in enumerate(masks.T):
        groups.setdefault(col.tobytes(), []).append(j)
    return {k: np.asarray(v, dtype=np.intp) for k, v in groups.items()}


def _refit_scores(G, C, X_val, Y_val, masks) -> np.ndarray:
    """Validation MSE of the unshrunk OLS refit on each target's support."""
    q = C.shape[1]
    scores = np.empty(q)
    for key, cols in _support_groups(masks).items():
        S = np.flatnonzero(masks[:, cols[0]])
        if S.size == 0:
            pred = np.zeros((cols.size, Y_val.shape[1]))
        else:
            try:
                Ws = spd_solve(G[np.ix_(S, S)], C[np.ix_(S, cols)])
            except SingularSystem as exc:
                logger.warning("skipping unshrunk refit on %d-voxel support: %s", S.size, exc)
                scores[cols] = np.inf
                continue
            pred = Ws.T @ X_val[S]
        R = Y_val[cols] - pred
        scores[cols] = (R * R).mean(axis=1)
    return scores


@dataclass
class LassoPathResult:
    """Per-target outcome of a validated lambda path (targets along axis 0)."""

    W: np.ndarray            # (q, p) LASSO coefficients at the chosen lambda
    lam: np.ndarray          # (q,) chosen lambda
    lam_max: np.ndarray      # (q,)
    val_mse: np.ndarray      # (q,) score of the chosen model
    path_scores: np.ndarray  # (q, n_lambdas)
    converged: np.ndarray    # (q,) all path fits converged

    def support(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.W[j])


def lasso_path_many(Y, X, Y_val, X_val, n_lambdas: int = 10, ratio: float = 1e-3,
                    refit: str = "unshrunk", opts: LassoOptions | None = None) -> LassoPathResult:
    """Validated LASSO paths for every row of ``Y`` against predictors ``X``.

    Each target gets its own linear path from its ``lambda_max`` down to
    ``ratio * lambda_max``; warm starts carry along the path.  With
    ``refit="unshrunk"`` each support is scored by an OLS refit, otherwise the
    shrunk LASSO coefficients are scored directly.  Ties go to the larger
    lambda.
    """
    opts = opts or LassoOptions()
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y_val = np.atleast_2d(np.asarray(Y_val, dtype=np.float64))
    X_val = np.atleast_2d(np.asarray(X_val, dtype=np.float64))
    if Y_val.shape[1] == 0:
        raise DimensionMismatch("validation block is empty")
    if refit not in ("unshrunk", "lasso"):
        raise ValueError(f"unknown refit convention {refit!r}")
    q, p = Y.shape[0], X.shape[0]
    G = X @ X.T
    C = X @ Y.T
    lam_max = 2.0 * np.abs(C).max(axis=0) if p else np.zeros(q)
    lams = np.stack([lambda_path(lm, n_lambdas, ratio) for lm in lam_max]) if q else np.zeros((0, n_lambdas))
    tol = opts.tol * np.sqrt((Y * Y).sum(axis=1))

    W = np.zeros((p, q))
    best_W = np.zeros((p, q))
    best_score = np.full(q, np.inf)
    best_k = np.zeros(q, dtype=np.intp)
    scores = np.full((q, n_lambdas), np.inf)
    all_conv = np.ones(q, dtype=bool)
    for k in range(n_lambdas):
        if k > 0:
            W, _, conv = coordinate_descent(G, C, lams[:, k], W, tol, opts.max_sweeps)
            all_conv &= conv
        # k == 0 is lambda_max: the null model by construction.
        if refit == "unshrunk":
            sc = _refit_scores(G, C, X_val, Y_val, W != 0)
        else:
            R = Y_val - W.T @ X_val
            sc = (R * R).mean(axis=1)
        scores[:, k] = sc
        better = sc < best_score
        best_score[better] = sc[better]
        best_k[better] = k
        best_W[:, better] = W[:, better]
    if not all_conv.all():
        logger.warning("%d of %d LASSO paths hit the sweep limit", int((~all_conv).sum()), q)
    chosen = lams[np.arange(q), best_k] if q else np.zeros(0)
    return LassoPathResult(best_W.T.copy(), chosen, lam_max, best_score, scores, all_conv)


def lasso_path_select(y, X, X_val, y_val, n_lambdas: int = 10, ratio: float = 1e-3,
                      refit: str = "unshrunk", opts: LassoOptions | None = None) -> tuple[SparseVectorSolution, float]:
    """Single-target front end to :func:`lasso_path_many`."""
    y = np.asarray(y, dtype=np.float64).ravel()
    X = np.atleast_2d(X)
    res = lasso_path_many(y[None, :], X, np.asarray(y_val, dtype=np.float64).reshape(1, -1), X_val,
                          n_lambdas, ratio, refit, opts)
    w = res.W[0]
    lam = float(res.lam[0])
    sol = SparseVectorSolution(w=w, support=np.flatnonzero(w), kkt_residual=lasso_kkt(y, X, w, lam),
                               converged=bool(res.converged[0]), penalty=lam, val_mse=float(res.val_mse[0]))
    return sol, lam


def default_mu_factors(n: int = 8) -> np.ndarray:
    return np.logspace(-6, 2, n)


@dataclass
class RidgeResult:
    W: np.ndarray        # (q, p), zero off each target's support
    mu: np.ndarray       # (q,)
    val_mse: np.ndarray  # (q,)


def ridge_many(Y, X, supports: np.ndarray, Y_val, X_val, mu_factors=None, mu_grid=None) -> RidgeResult:
    """Support-constrained ridge for many targets.

    ``supports`` is a (q, p) boolean mask.  The candidate penalties are
    ``mu_grid`` if given, else ``mu_factors * trace(G_SS) / |S|``; each target
    keeps the candidate with the lowest validation MSE (ties: larger mu).
    Empty supports give zero coefficients scored as ``mean(y_val**2)``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y_val = np.atleast_2d(np.asarray(Y_val, dtype=np.float64))
    X_val = np.atleast_2d(np.asarray(X_val, dtype=np.float64))
    masks = np.asarray(supports, dtype=bool)
    q, p = Y.shape[0], X.shape[0]
    if masks.shape != (q, p):
        raise DimensionMismatch(f"support mask shape {masks.shape} != {(q, p)}")
    factors = default_mu_factors() if mu_factors is None else np.asarray(mu_factors, dtype=np.float64)
    G = X @ X.T
    C = X @ Y.T
    W = np.zeros((q, p))
    mus = np.zeros(q)
    val = np.empty(q)
    for key, cols in _support_groups(masks.T).items():
        S = np.flatnonzero(masks[cols[0]])
        if S.size == 0:
            val[cols] = (Y_val[cols] ** 2).mean(axis=1)
            mus[cols] = np.nan
            continue
        Gs = G[np.ix_(S, S)]
        grid = (np.asarray(mu_grid, dtype=np.float64) if mu_grid is not None
                else factors * np.trace(Gs) / S.size)
        # Descending order so that argmin's first hit is the larger mu.
        grid = np.sort(grid)[::-1]
        evals, evecs = np.linalg.eigh(Gs)
        proj = evecs.T @ C[np.ix_(S, cols)]
        best = np.full(cols.size, np.inf)
        best_w = np.zeros((S.size, cols.size))
        best_mu = np.zeros(cols.size)
        for mu in grid:
            denom = evals + mu
            if np.any(denom <= 1e-12 * max(evals.max(), 1e-300)):
                logger.warning("skipping singular ridge system (mu=%g, |S|=%d)", mu, S.size)
                continue
            Ws = evecs @ (proj / denom[:, None])
            R = Y_val[cols] - Ws.T @ X_val[S]
            sc = (R * R).mean(axis=1)
            better = sc < best
            best[better] = sc[better]
            best_w[:, better] = Ws[:, better]
            best_mu[better] = mu
        W[np.ix_(cols, S)] = best_w.T
        mus[cols] = best_mu
        val[cols] = best
    return RidgeResult(W, mus, val)


def ridge_on_support(y, X, support, mu_grid=None, X_val=None, y_val=None) -> SparseVectorSolution:
    """Ridge regression on ``support`` with the penalty picked by validation MSE."""
    y = np.asarray(y, dtype=np.float64).ravel()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X_val is None or y_val is None:
        raise ValueError("ridge_on_support needs validation data to choose mu")
    mask = np.zeros((1, X.shape[0]), dtype=bool)
    mask[0, np.asarray(support, dtype=np.intp)] = True
    res = ridge_many(y[None, :], X, mask, np.asarray(y_val, dtype=np.float64).reshape(1, -1), X_val,
                     mu_grid=mu_grid)
    w = res.W[0]
    return SparseVectorSolution(w=w, support=np.flatnonzero(w), penalty=float(res.mu[0]),
                                val_mse=float(res.val_mse[0]))
