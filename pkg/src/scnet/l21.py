"""Column-group-sparse multi-target regression.

Solves::

    min_W  ||Y - W X||_F^2 + lam * sum_j ||W[:, j]||_2

with ``Y`` of shape (m, n), ``X`` of shape (p, n) and ``W`` of shape (m, p),
by iteratively reweighted least squares: alternate
``D_jj = 1 / (2 max(||w_j||, eps))`` and ``W = Y X^T (X X^T + lam D)^{-1}``.

Every iterate has the form ``W = F Z`` with ``F = Y X^T`` (m x p) and a
p x p coefficient matrix ``Z``.  Column norms, the objective and column
gradients are therefore quadratic forms in ``H = F^T F``, so each iteration
costs O(p^3) regardless of the number of targets or time points.

IRLS only drives inactive columns towards zero geometrically.  After the
reweighting phase the solver finalises the support with exact block updates:
a column whose block-optimal value (others held fixed) is zero is removed,
and an inactive column that violates its optimality condition is re-entered
at its block-optimal value.  Both moves never increase the objective, so the
recorded objective trace stays monotone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, SingularSystem
from .linalg import spd_inv, spd_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class L21Options:
    eps: float = 1e-10
    max_iter: int = 500
    tol: float = 1e-8
    kkt_tol: float = 1e-6
    refine_tol: float = 1e-12   # fixed-point residual targeted by the Newton refinement
    zero_tol: float = 1e-8
    max_rounds: int = 50
    screen_every: int = 5


@dataclass(frozen=True)
class L21Problem:
    Y: np.ndarray
    X: np.ndarray
    lam: float

    def __post_init__(self):
        Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if Y.shape[1] != X.shape[1]:
            raise DimensionMismatch(f"Y has {Y.shape[1]} time points, X has {X.shape[1]}")
        if not (np.isfinite(Y).all() and np.isfinite(X).all()):
            raise ValueError("problem data must be finite")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if X.shape[1] < X.shape[0]:
            logger.warning("l21 problem has fewer time points (%d) than predictors (%d)", *X.shape[::-1])
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)


@dataclass
class L21Solution:
    W: np.ndarray
    active_columns: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    kkt_active: float = 0.0
    kkt_inactive: float = 0.0

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def l21_norm(W) -> float:
    return float(np.sqrt((np.asarray(W) ** 2).sum(axis=0)).sum())


def objective(Y, X, W, lam) -> float:
    R = np.asarray(Y) - np.asarray(W) @ np.asarray(X)
    return float((R * R).sum() + lam * l21_norm(W))


def lambda21_max(Y, X) -> float:
    """Smallest penalty whose solution is identically zero: ``2 max_j ||Y x_j^T||``."""
    F = np.atleast_2d(Y) @ np.atleast_2d(X).T
    if F.size == 0:
        return 0.0
    return float(2.0 * np.sqrt((F * F).sum(axis=0)).max())


def lambda_path(lam_max: float, n: int, ratio: float = 1e-3) -> np.ndarray:
    """``n`` linearly spaced values from ``lam_max`` down to ``ratio * lam_max``."""
    return np.linspace(lam_max, ratio * lam_max, n)


class _GramState:
    """Sufficient statistics of an l21 problem in coefficient space."""

    def __init__(self, Y: np.ndarray, X: np.ndarray):
        self.G = X @ X.T
        self.F = Y @ X.T
        self.H = self.F.T @ self.F
        self.yy = float((Y * Y).sum())
        self.p = X.shape[0]

    def evaluate(self, Z: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
        HZ = self.H @ Z
        ZHZ = Z.T @ HZ
        norms = np.sqrt(np.clip(np.diag(ZHZ), 0.0, None))
        loss = self.yy - 2.0 * np.trace(HZ) + float((ZHZ * self.G).sum())
        return max(loss, 0.0) + lam * float(norms.sum()), norms

    def block_gradient(self, Z: np.ndarray, j: int) -> tuple[float, np.ndarray]:
        """Norm of ``2 R_j x_j^T`` (column j removed from the fit) and its Z-space direction."""
        u = -(Z @ self.G[:, j])
        u[j] += 1.0
        u += Z[:, j] * self.G[j, j]
        return 2.0 * float(np.sqrt(max(u @ self.H @ u, 0.0))), u


def _irls(state: _GramState, lam: float, Z: np.ndarray, norms: np.ndarray, active: np.ndarray,
          opts: L21Options, trace: list[float], stop_rel: float, budget: int) -> tuple[np.ndarray, np.ndarray, int, bool]:
    """Reweighting iterations restricted to ``active``; appends to ``trace``."""
    prev = trace[-1] if trace else np.inf
    for it in range(1, budget + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            Z = np.zeros_like(Z)
            f, norms = state.evaluate(Z, lam)
            trace.append(f)
            return Z, norms, it, True
        d = 1.0 / (2.0 * np.maximum(norms[idx], opts.eps))
        Z = np.zeros((state.p, state.p))
        Z[np.ix_(idx, idx)] = spd_inv(state.G[np.ix_(idx, idx)] + lam * np.diag(d))
        f, norms = state.evaluate(Z, lam)
        trace.append(f)
        if opts.screen_every and it % opts.screen_every == 0 and _drop_zero_blocks(state, lam, Z, active):
            f, norms = state.evaluate(Z, lam)
            trace.append(f)
        if abs(prev - f) <= stop_rel * max(abs(f), np.finfo(float).tiny):
            return Z, norms, it, True
        prev = f
    return Z, norms, budget, False


def _drop_zero_blocks(state: _GramState, lam: float, Z: np.ndarray, active: np.ndarray) -> bool:
    """Zero every active column whose block-optimal value is zero (in place)."""
    changed = False
    for j in np.flatnonzero(active):
        g, _ = state.block_gradient(Z, j)
        if g <= lam:
            Z[:, j] = 0.0
            active[j] = False
            changed = True
    return changed


def _refine(state: _GramState, lam: float, Z: np.ndarray, norms: np.ndarray, active: np.ndarray,
            opts: L21Options, trace: list[float]) -> tuple[np.ndarray, np.ndarray, int]:
    """Drive the reweighting map to its fixed point on a fixed active set.

    For weights built from trial norms ``n`` the IRLS iterate has column
    norms ``nn(n)``; its stationarity residual on column j is exactly
    ``lam * |1 - nn_j / n_j|``.  Newton steps on ``nn(n) - n = 0`` (analytic
    Jacobian) are taken when they lower the objective; otherwise the plain
    IRLS update ``n <- nn`` is used.
    """
    idx = np.flatnonzero(active)
    p = state.p
    if idx.size == 0:
        return np.zeros((p, p)), np.zeros(p), 0
    G = state.G[np.ix_(idx, idx)]
    H = state.H[np.ix_(idx, idx)]
    target = min(opts.refine_tol, 0.1 * opts.kkt_tol)

    def at(n):
        Zaa = spd_inv(G + 0.5 * lam * np.diag(1.0 / n))
        M = Zaa @ H @ Zaa
        nn = np.sqrt(np.clip(np.diag(M), 0.0, None))
        f = state.yy - 2.0 * float((H * Zaa).sum()) + float((M * G).sum())
        return Zaa, M, nn, max(f, 0.0) + lam * float(nn.sum())

    n = np.maximum(norms[idx], opts.eps)
    Zaa, M, nn, f = at(n)
    trace.append(f)
    it = 0
    for it in range(1, opts.max_iter + 1):
        if np.max(np.abs(1.0 - nn / n)) <= target:
            break
        J = 0.5 * lam * Zaa * M / (n ** 2)[None, :] / np.maximum(nn, opts.eps)[:, None]
        step = None
        try:
            cand = n + np.linalg.solve(J - np.eye(idx.size), n - nn)
            if np.all(cand > 0) and np.all(np.isfinite(cand)):
                step = cand
        except np.linalg.LinAlgError:
            pass
        moved = False
        resid = np.max(np.abs(1.0 - nn / n))
        for cand in ((step, nn) if step is not None else (nn,)):
            c = np.maximum(cand, opts.eps)
            out = at(c)
            # Near the optimum the objective is flat to rounding; accept a
            # step there only if it shrinks the fixed-point residual.
            flat = out[3] <= f + 64 * np.finfo(float).eps * abs(f)
            if out[3] <= f or (flat and np.max(np.abs(1.0 - out[2] / c)) < resid):
                n, (Zaa, M, nn, f) = c, out
                trace.append(f)
                moved = True
                break
        if not moved:
            break
    Z = np.zeros((p, p))
    Z[np.ix_(idx, idx)] = Zaa
    full = np.zeros(p)
    full[idx] = nn
    return Z, full, it


def solve_l21(problem: L21Problem, opts: L21Options | None = None, W0: np.ndarray | None = None) -> L21Solution:
    """Solve one l21-penalised regression.

    ``W0`` seeds the first reweighting (warm start); without it the first step
    is a ridge fit with unit weights.
    """
    opts = opts or L21Options()
    Y, X, lam = problem.Y, problem.X, float(problem.lam)
    m, p = Y.shape[0], X.shape[0]
    state = _GramState(Y, X)
    trace: list[float] = []

    if lam == 0.0:
        Z = spd_inv(state.G)
        f, _ = state.evaluate(Z, 0.0)
        W = state.F @ Z
        return _finish(state, Y, X, W, lam, [f], 1, True, opts)

    if W0 is None:
        norms = np.full(p, 0.5)
    else:
        norms = np.sqrt((np.asarray(W0, dtype=np.float64) ** 2).sum(axis=0))
        norms = np.where(norms > 0, norms, 0.5)
    active = np.ones(p, dtype=bool)
    Z, norms, iters, _ = _irls(state, lam, np.zeros((p, p)), norms, active, opts, trace,
                               opts.tol, opts.max_iter)

    for _ in range(opts.max_rounds):
        changed = _drop_zero_blocks(state, lam, Z, active)
        # Re-enter violating columns at their block optimum.
        for j in np.flatnonzero(~active):
            g, u = state.block_gradient(Z, j)
            if g > lam * (1.0 + opts.kkt_tol):
                Z[:, j] = u * (1.0 - lam / g) / state.G[j, j]
                active[j] = True
                changed = True
        if changed:
            f, norms = state.evaluate(Z, lam)
            trace.append(f)
        Z, norms, used = _refine(state, lam, Z, norms, active, opts, trace)
        iters += used
        if not changed:
            break
    return _finish(state, Y, X, state.F @ Z, lam, trace, iters, None, opts)


def _kkt(state: _GramState, W: np.ndarray, lam: float, active_idx: np.ndarray) -> tuple[float, float]:
    """(max active residual, max inactive gradient / lam)."""
    grad = 2.0 * (W @ state.G - state.F)
    norms = np.sqrt((W * W).sum(axis=0))
    gnorm = np.sqrt((grad * grad).sum(axis=0))
    act = np.zeros(W.shape[1], dtype=bool)
    act[active_idx] = True
    kkt_a = 0.0
    if act.any():
        res = grad[:, act] + lam * W[:, act] / np.where(norms[act] > 0, norms[act], 1.0)
        kkt_a = float(np.sqrt((res * res).sum(axis=0)).max())
    kkt_i = float(gnorm[~act].max() / lam) if (~act).any() and lam > 0 else 0.0
    return kkt_a, kkt_i


def _finish(state, Y, X, W, lam, trace, iters, converged, opts) -> L21Solution:
    norms = np.sqrt((W * W).sum(axis=0))
    top = norms.max() if norms.size else 0.0
    zero = norms <= opts.zero_tol * top
    W = W.copy()
    W[:, zero] = 0.0
    active = np.flatnonzero(~zero)
    kkt_a, kkt_i = _kkt(state, W, lam, active)
    if converged is None:
        converged = kkt_a <= opts.kkt_tol * lam and kkt_i <= 1.0 + opts.kkt_tol
    if not converged:
        logger.warning("l21 solver hit its iteration budget at lam=%g", lam)
    return L21Solution(W=W, active_columns=active, objective_trace=list(trace), iterations=iters,
                       converged=converged, kkt_active=kkt_a / lam if lam > 0 else kkt_a,
                       kkt_inactive=kkt_i)


def unshrunk_refit(Y, X, active_columns) -> np.ndarray:
    """Ordinary least squares restricted to ``active_columns``; zeros elsewhere."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    active = np.asarray(active_columns, dtype=np.intp)
    W = np.zeros((Y.shape[0], X.shape[0]))
    if active.size == 0:
        return W
    Xa = X[active]
    if active.size > Xa.shape[1]:
        raise SingularSystem(f"{active.size} active columns but only {Xa.shape[1]} time points")
    W[:, active] = spd_solve(Xa @ Xa.T, Xa @ Y.T).T
    return W


@dataclass
class L21PathResult:
    lambdas: np.ndarray
    val_mse: np.ndarray
    supports: list[np.ndarray]
    best: int

    @property
    def lam(self) -> float:
        return float(self.lambdas[self.best])

    @property
    def support(self) -> np.ndarray:
        return self.supports[self.best]


def select_l21_path(Y, X, Y_val, X_val, n_lambdas: int = 20, ratio: float = 1e-3,
                    opts: L21Options | None = None) -> L21PathResult:
    """Fit the linear lambda path and keep the support whose unshrunk refit
    has the lowest validation MSE (ties go to the larger lambda).
    """
    opts = opts or L21Options()
    lam_max = lambda21_max(Y, X)
    # lam_max = 0 means Y is orthogonal to every predictor: only the null model exists.
    lambdas = lambda_path(lam_max, n_lambdas, ratio)
    supports: list[np.ndarray] = []
    scores = np.full(n_lambdas, np.inf)
    W_prev = None
    for k, lam in enumerate(lambdas):
        if k == 0 or lam_max <= 0:
            # lam_max yields the null model by construction.
            sol_support = np.empty(0, dtype=np.intp)
        else:
            sol = solve_l21(L21Problem(Y, X, lam), opts, W0=W_prev)
            W_prev = sol.W if sol.active_columns.size else None
            sol_support = sol.active_columns
        supports.append(sol_support)
        try:
            W = unshrunk_refit(Y, X, sol_support)
        except SingularSystem as exc:
            logger.warning("skipping unshrunk refit at lam=%g: %s", lam, exc)
            continue
        R = Y_val - W @ X_val
        scores[k] = float((R * R).mean())
    best = int(np.argmin(scores))
    return L21PathResult(lambdas, scores, supports, best)
