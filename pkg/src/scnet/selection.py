"""Two-stage causal voxel selection, the final ridge model and its
permutation significance test.

Stage 1 fits, for every atlas region, an l21-penalised lag-1 model that
predicts all voxels outside the region from the region's own voxels; the
voxels behind nonzero columns survive.  Stage 2 fits one LASSO per voxel
on the stage-1 survivors, then a ridge model restricted to each LASSO
support.

All fitting uses lag pairs formed inside the train and validation blocks.
The test block is read only by :func:`significance_test`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import AtlasPartition, SubjectData
from .errors import EmptyStage1
from .l21 import L21Options, select_l21_path
from .lasso_ridge import LassoOptions, default_mu_factors, lasso_path_many, ridge_many

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PathConfig:
    stage1_n_lambdas: int = 20
    stage2_n_lambdas: int = 10
    lambda_ratio: float = 1e-3
    refit: str = "unshrunk"
    mu_factors: tuple[float, ...] = tuple(default_mu_factors())
    center: bool = True
    scale: bool = False
    permutation: str = "predictors"
    threads: int = 1
    l21: L21Options = field(default_factory=L21Options)
    lasso: LassoOptions = field(default_factory=LassoOptions)


@dataclass(frozen=True)
class LagData:
    """Lag-1 predictor/target pairs of the train and validation blocks."""

    past: np.ndarray
    future: np.ndarray
    val_past: np.ndarray
    val_future: np.ndarray

    @classmethod
    def from_subject(cls, subject: SubjectData) -> "LagData":
        tr, va = subject.train, subject.val
        if tr.shape[1] < 2 or va.shape[1] < 2:
            raise ValueError("train and validation blocks need at least 2 time points each")
        return cls(tr[:, :-1], tr[:, 1:], va[:, :-1], va[:, 1:])

    def shuffled(self, perm: np.ndarray) -> "LagData":
        return replace(self, past=self.past[:, perm])


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- stage 1 ------------------------------------------------------------------

@dataclass
class RegionFit:
    region: int
    n_voxels: int
    lam: float
    lam_max: float
    val_mse: float
    selected: np.ndarray


@dataclass
class Stage1Result:
    regions: list[RegionFit]
    selected: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.selected.size)


def _fit_region(lag: LagData, voxels: np.ndarray, rest: np.ndarray, region: int,
                cfg: PathConfig) -> RegionFit:
    if rest.size == 0:
        return RegionFit(region, voxels.size, 0.0, 0.0, float("nan"), np.empty(0, np.intp))
    if voxels.size >= lag.past.shape[1]:
        logger.warning("region %d has %d voxels but only %d training pairs; "
                       "refits on large supports will be skipped", region, voxels.size, lag.past.shape[1])
    res = select_l21_path(lag.future[rest], lag.past[voxels], lag.val_future[rest], lag.val_past[voxels],
                          cfg.stage1_n_lambdas, cfg.lambda_ratio, cfg.l21)
    return RegionFit(region, voxels.size, res.lam, float(res.lambdas[0]), float(res.val_mse[res.best]),
                     voxels[res.support])


def fit_stage1(lag: LagData, atlas: AtlasPartition, cfg: PathConfig) -> Stage1Result:
    V = atlas.n_voxels
    regions = atlas.regions()
    everyone = np.arange(V)

    def work(i):
        vox = regions[i]
        rest = np.setdiff1d(everyone, vox, assume_unique=True)
        return _fit_region(lag, vox, rest, i + 1, cfg)

    fits = _map(work, range(len(regions)), cfg.threads)
    sel = [f.selected for f in fits]
    union = np.unique(np.concatenate(sel)) if sel else np.empty(0, np.intp)
    return Stage1Result(fits, union.astype(np.intp))


def run_stage1(subject: SubjectData, cfg: PathConfig | None = None) -> Stage1Result:
    """Stage 1 on an already standardised subject."""
    cfg = cfg or PathConfig()
    return fit_stage1(LagData.from_subject(subject), subject.atlas, cfg)


# -- stage 2 ------------------------------------------------------------------

@dataclass
class Stage2Result:
    s1_voxels: np.ndarray      # stage-1 survivors, ascending
    lasso_W: np.ndarray        # (V, V_S1): row j is w**_j
    lam: np.ndarray            # (V,)
    lasso_val_mse: np.ndarray  # (V,)
    ridge_W: np.ndarray        # (V_S1, V): W***, column j zero off supp(w**_j)
    mu: np.ndarray             # (V,), NaN where the support is empty
    ridge_val_mse: np.ndarray  # (V,)

    @property
    def selected(self) -> np.ndarray:
        """Stage-1 voxels used by at least one LASSO model."""
        return self.s1_voxels[(self.lasso_W != 0).any(axis=0)]

    def support(self, j: int) -> np.ndarray:
        return self.s1_voxels[np.flatnonzero(self.lasso_W[j])]


def fit_stage2(lag: LagData, s1_voxels: np.ndarray, cfg: PathConfig) -> Stage2Result:
    s1 = np.asarray(s1_voxels, dtype=np.intp)
    if s1.size == 0:
        raise EmptyStage1("stage 1 selected no voxels")
    X, Xv = lag.past[s1], lag.val_past[s1]
    path = lasso_path_many(lag.future, X, lag.val_future, Xv, cfg.stage2_n_lambdas,
                           cfg.lambda_ratio, cfg.refit, cfg.lasso)
    ridge = ridge_many(lag.future, X, path.W != 0, lag.val_future, Xv, mu_factors=cfg.mu_factors)
    return Stage2Result(s1, path.W, path.lam, path.val_mse, ridge.W.T.copy(), ridge.mu, ridge.val_mse)


def run_stage2(subject: SubjectData, stage1: Stage1Result, cfg: PathConfig | None = None) -> Stage2Result:
    cfg = cfg or PathConfig()
    return fit_stage2(LagData.from_subject(subject), stage1.selected, cfg)


# -- significance --------------------------------------------------------------

@dataclass
class SignificanceReport:
    observed: np.ndarray   # (V,) test MSE of W***
    shuffled: np.ndarray   # (n_perm, V)
    p_values: np.ndarray   # (V,)
    alpha: float = 0.05

    @property
    def significant(self) -> np.ndarray:
        return self.p_values <= self.alpha

    @property
    def fraction_significant(self) -> float:
        return float(self.significant.mean()) if self.p_values.size else 0.0


def heldout_mse(test_block: np.ndarray, s1_voxels: np.ndarray, ridge_W: np.ndarray) -> np.ndarray:
    past, future = test_block[:, :-1], test_block[:, 1:]
    if s1_voxels.size == 0:
        pred = np.zeros_like(future)
    else:
        pred = ridge_W.T @ past[s1_voxels]
    R = future - pred
    return (R * R).mean(axis=1)


def permutation_p_values(observed: np.ndarray, shuffled: np.ndarray) -> np.ndarray:
    """Add-one permutation p-value: ``(1 + #{shuffled <= observed}) / (1 + n_perm)``."""
    n_perm = shuffled.shape[0]
    return (1.0 + (shuffled <= observed[None, :]).sum(axis=0)) / (1.0 + n_perm)


def significance_test(subject: SubjectData, s1_voxels: np.ndarray, ridge_W: np.ndarray | None,
                      n_perm: int = 100, seed: int = 0, cfg: PathConfig | None = None,
                      alpha: float = 0.05) -> SignificanceReport:
    """Compare each voxel's test MSE with models refit on time-shuffled training data.

    ``s1_voxels`` and ``ridge_W`` describe the fitted model (``ridge_W`` is
    ``None`` when stage 1 selected nothing).  The permutation reorders the
    training predictor block only, breaking its lag alignment with the
    fixed targets.  With ``cfg.permutation == "predictors"`` the stage-1
    voxel set stays frozen; ``"full"`` reruns stage 1 on every shuffled copy.
    """
    cfg = cfg or PathConfig()
    if cfg.permutation not in ("predictors", "full"):
        raise ValueError(f"unknown permutation scheme {cfg.permutation!r}")
    lag = LagData.from_subject(subject)
    test_block = subject.test_block()
    V = subject.n_voxels
    s1_voxels = np.asarray(s1_voxels, dtype=np.intp)
    if ridge_W is None or s1_voxels.size == 0:
        observed = heldout_mse(test_block, np.empty(0, np.intp), np.zeros((0, V)))
    else:
        observed = heldout_mse(test_block, s1_voxels, ridge_W)
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(lag.past.shape[1]) for _ in range(n_perm)]
    inner = replace(cfg, threads=1)

    def work(perm):
        sh = lag.shuffled(perm)
        s1 = fit_stage1(sh, subject.atlas, inner).selected if cfg.permutation == "full" else s1_voxels
        if s1.size == 0:
            return heldout_mse(test_block, s1, np.zeros((0, V)))
        res = fit_stage2(sh, s1, inner)
        return heldout_mse(test_block, res.s1_voxels, res.ridge_W)

    if s1_voxels.size == 0 and cfg.permutation == "predictors":
        shuffled = np.tile(observed, (n_perm, 1))
    else:
        shuffled = np.array(_map(work, perms, cfg.threads)).reshape(n_perm, V)
    return SignificanceReport(observed, shuffled, permutation_p_values(observed, shuffled), alpha)


# -- whole subject ------------------------------------------------------------

@dataclass
class SubjectSelection:
    subject: SubjectData          # standardised copy actually fitted
    stage1: Stage1Result
    stage2: Stage2Result | None
    significance: SignificanceReport | None = None


def select_voxels(subject: SubjectData, cfg: PathConfig | None = None, n_perm: int = 100,
                  seed: int = 0, with_significance: bool = True) -> SubjectSelection:
    """Standardise, run both stages and (optionally) the permutation test.

    An empty stage-1 set is not an error here: the subject gets no stage-2
    model and every voxel keeps the null prediction.
    """
    cfg = cfg or PathConfig()
    subj = subject.standardized(center=cfg.center, scale=cfg.scale)
    s1 = run_stage1(subj, cfg)
    try:
        s2 = run_stage2(subj, s1, cfg)
    except EmptyStage1:
        logger.warning("%s: stage 1 selected no voxels", subject.name)
        s2 = None
    sig = (significance_test(subj, s1.selected, s2.ridge_W if s2 is not None else None, n_perm, seed, cfg)
           if with_significance else None)
    return SubjectSelection(subj, s1, s2, sig)
