"""Beta grid search and geometry-based prediction of the optimal beta.

The sweep gives the oracle ``beta*`` per (model, OOD dataset). The
regressor maps in-distribution geometry metrics to ``beta_hat``; it is
evaluated leave-one-dataset-out so the target OOD set is never seen.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from geood.embeddings_io import EmbeddingSet
from geood.evaluation import fpr_at_tpr, pearson
from geood.exceptions import ComputationError, DataError, GeoodError
from geood.radial import RadialConfig, fit_beta_pipeline, score_beta_pipeline
from geood.validation import check_detector

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_LAMBDA = 1e-2
COLLINEARITY_THRESHOLD = 0.9


def default_grid(lo: float = -2.0, hi: float = 3.0, step: float = 0.25) -> np.ndarray:
    return make_grid(lo, hi, step)


def make_grid(lo: float, hi: float, step: float) -> np.ndarray:
    """Inclusive arithmetic grid ``lo:hi:step``, always containing 0 and 1."""
    if step <= 0 or hi < lo:
        raise DataError(f"invalid beta grid {lo}:{hi}:{step}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    grid = np.round(lo + step * np.arange(n), 10)
    return ensure_baselines(grid)


def ensure_baselines(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise DataError("beta grid is empty")
    return np.unique(np.concatenate([grid, [0.0, 1.0]]))


def parse_grid(spec: str) -> np.ndarray:
    """Parse ``"lo:hi:step"`` (or a comma list of values)."""
    try:
        if ":" in spec:
            lo, hi, step = (float(s) for s in spec.split(":"))
            return make_grid(lo, hi, step)
        return ensure_baselines([float(s) for s in spec.split(",") if s.strip()])
    except ValueError as exc:
        raise DataError(f"cannot parse beta grid {spec!r}") from exc


@dataclass
class BetaSweepResult:
    grid: np.ndarray
    fpr_per_beta: np.ndarray  # NaN marks a beta whose fit/score failed
    beta_star: float
    detector: str
    dataset: str

    def fpr_at(self, beta: float) -> float:
        i = int(np.argmin(np.abs(self.grid - beta)))
        return float(self.fpr_per_beta[i])

    def snap(self, beta: float) -> float:
        return float(self.grid[int(np.argmin(np.abs(self.grid - beta)))])

    @property
    def fpr_star(self) -> float:
        return self.fpr_at(self.beta_star)


def select_beta_star(grid: np.ndarray, fpr: np.ndarray) -> float:
    """Argmin of ``fpr``; ties go to the beta closest to 0, then the smaller one."""
    ok = np.isfinite(fpr)
    if not ok.any():
        raise ComputationError("every beta in the grid failed")
    best = np.min(fpr[ok])
    cands = grid[ok & (fpr == best)]
    return float(sorted(cands, key=lambda b: (abs(b), b))[0])


def _sweep_one_beta(train, id_eval, oods, detectors, beta, cfg):
    try:
        model = fit_beta_pipeline(train, beta, cfg)
        out = {}
        for det in detectors:
            ids = score_beta_pipeline(model, id_eval, beta, cfg, det).scores
            for name, ood in oods.items():
                out[det, name] = fpr_at_tpr(ids, score_beta_pipeline(model, ood, beta, cfg, det).scores).fpr
        return out
    except GeoodError as exc:
        logger.warning("beta=%g failed: %s", beta, exc)
        return {}


def sweep_beta_many(train: EmbeddingSet, id_eval: EmbeddingSet, oods: Mapping[str, EmbeddingSet],
                    detectors: Sequence[str] = ("MD",), grid=None, cfg: RadialConfig | None = None,
                    n_threads: int = 1) -> dict[tuple[str, str], BetaSweepResult]:
    """Sweep every (detector, OOD dataset) cell, sharing one fit per beta.

    Results are keyed ``(detector, dataset)``. Threads only parallelize
    over beta values; outputs do not depend on ``n_threads``.
    """
    grid = default_grid() if grid is None else ensure_baselines(grid)
    cfg = cfg or RadialConfig()
    detectors = [check_detector(d) for d in detectors]
    if not oods:
        raise DataError("no OOD datasets to sweep")
    args = [(train, id_eval, oods, detectors, float(b), cfg) for b in grid]
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            per_beta = list(pool.map(lambda a: _sweep_one_beta(*a), args))
    else:
        per_beta = [_sweep_one_beta(*a) for a in args]
    results = {}
    for det in detectors:
        for name in oods:
            fpr = np.array([cell.get((det, name), np.nan) for cell in per_beta])
            results[det, name] = BetaSweepResult(grid.copy(), fpr, select_beta_star(grid, fpr), det, name)
    return results


def sweep_beta(train: EmbeddingSet, id_eval: EmbeddingSet, ood: EmbeddingSet, detector: str = "MD",
               grid=None, cfg: RadialConfig | None = None, n_threads: int = 1) -> BetaSweepResult:
    """FPR@95 for every beta in ``grid`` and the oracle ``beta*``."""
    detector = check_detector(detector)
    res = sweep_beta_many(train, id_eval, {ood.name: ood}, [detector], grid, cfg, n_threads)
    return res[detector, ood.name]


# -- regression ------------------------------------------------------------------

def collinearity_filter(features, names: Sequence[str] | None = None,
                        threshold: float = COLLINEARITY_THRESHOLD) -> list[str]:
    """Greedy pass in column order keeping features with ``|rho| <= threshold`` to all kept ones.

    Constant columns are dropped too, since their correlation is undefined.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("features must be a (models x metrics) matrix")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise DataError("names do not match feature columns")
    if X.shape[0] < 3:
        raise DataError(f"collinearity filter needs >= 3 rows, got {X.shape[0]}")
    kept: list[int] = []
    for j in range(X.shape[1]):
        col = X[:, j]
        if not np.all(np.isfinite(col)) or np.ptp(col) == 0:
            continue
        if all(abs(pearson(col, X[:, i])) <= threshold for i in kept):
            kept.append(j)
    if not kept:
        raise DataError("collinearity filter retained no features")
    return [names[j] for j in kept]


class BetaRegressor(RegressorMixin, BaseEstimator):
    """Ridge regression on standardized geometry features.

    Parameters
    ----------
    ridge_lambda : float
        Penalty on the standardized weights; the intercept is not penalized.
    collinearity_threshold : float or None
        Features whose ``|pearson|`` with an earlier kept feature exceeds
        this are dropped before fitting. ``None`` disables the filter.

    Attributes
    ----------
    feature_names_ : list of str
        Retained features, in input order.
    feature_means_, feature_stds_ : ndarray
    coef_ : ndarray
        Weights on the standardized features.
    intercept_ : float
    dropped_collinear_ : list of str
    """

    def __init__(self, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                 collinearity_threshold: float | None = COLLINEARITY_THRESHOLD):
        self.ridge_lambda = ridge_lambda
        self.collinearity_threshold = collinearity_threshold

    def fit(self, X, y, feature_names: Sequence[str] | None = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError("X must be (rows x features) aligned with y")
        if X.shape[0] < 2:
            raise DataError("need >= 2 training rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("regression inputs must be finite")
        names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
        if self.collinearity_threshold is not None and X.shape[0] >= 3:
            kept = collinearity_filter(X, names, self.collinearity_threshold)
        else:
            kept = list(names)
        cols = [names.index(n) for n in kept]
        Xk = X[:, cols]
        means = Xk.mean(axis=0)
        stds = Xk.std(axis=0)
        if np.any(stds == 0):
            raise DataError(f"zero-variance feature {kept[int(np.flatnonzero(stds == 0)[0])]!r}")
        Z = (Xk - means) / stds
        y_mean = y.mean()
        A = Z.T @ Z + self.ridge_lambda * np.eye(Z.shape[1])
        try:
            # solve raises only on exact singularity; also reject numerically singular systems
            if self.ridge_lambda <= 0 and np.linalg.cond(A) > 1e12:
                raise np.linalg.LinAlgError("singular normal equations")
            coef = np.linalg.solve(A, Z.T @ (y - y_mean))
        except np.linalg.LinAlgError as exc:
            raise ComputationError(f"ridge system is singular ({exc}); use ridge_lambda > 0") from exc
        self.feature_names_ = kept
        self.feature_names_all_ = names
        self.dropped_collinear_ = [n for n in names if n not in kept]
        self.feature_means_ = means
        self.feature_stds_ = stds
        self.coef_ = coef
        self.intercept_ = float(y_mean)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        cols = [self.feature_names_all_.index(n) for n in self.feature_names_]
        Z = (X[:, cols] - self.feature_means_) / self.feature_stds_
        return Z @ self.coef_ + self.intercept_

    @property
    def raw_coef_(self) -> np.ndarray:
        """Weights in the original feature units."""
        return self.coef_ / self.feature_stds_

    @property
    def raw_intercept_(self) -> float:
        return float(self.intercept_ - self.raw_coef_ @ self.feature_means_)

    def predict_one(self, features: Mapping[str, float]) -> float:
        return float(self.predict(np.array([[features[n] for n in self.feature_names_all_]]))[0])


def _matrix(rows: Sequence[Mapping[str, float]], names: Sequence[str]) -> np.ndarray:
    return np.array([[float(r[n]) for n in names] for r in rows], dtype=np.float64)


def common_feature_names(rows: Sequence[Mapping[str, float]]) -> list[str]:
    """Feature names present (and finite) in every row, ordered as in the first row."""
    names = [n for n in rows[0] if all(n in r and math.isfinite(float(r[n])) for r in rows)]
    if not names:
        raise DataError("rows share no finite features")
    return names


def train_beta_regressor(rows: Sequence[tuple[Mapping[str, float], float]],
                         ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                         collinearity_threshold: float | None = COLLINEARITY_THRESHOLD) -> BetaRegressor:
    """Fit a :class:`BetaRegressor` on ``(geometry features, beta*)`` pairs."""
    if len(rows) < 2:
        raise DataError("need >= 2 rows to train the beta regressor")
    feats = [f for f, _ in rows]
    names = common_feature_names(feats)
    X = _matrix(feats, names)
    y = np.array([b for _, b in rows], dtype=np.float64)
    return BetaRegressor(ridge_lambda, collinearity_threshold).fit(X, y, names)


@dataclass
class LodoRow:
    """One (model, OOD dataset) cell: ID geometry features plus the sweep outcome.

    ``sweep`` may be omitted when only ``beta_star`` is known; FPR columns
    are then NaN.
    """

    model: str
    dataset: str
    features: Mapping[str, float]
    beta_star: float
    sweep: BetaSweepResult | None = None

    @classmethod
    def from_sweep(cls, model: str, features: Mapping[str, float], sweep: BetaSweepResult) -> "LodoRow":
        return cls(model, sweep.dataset, features, sweep.beta_star, sweep)


@dataclass
class LodoReport:
    detector: str
    mae: float
    r2: float
    baseline_mae: float
    mae_snapped: float
    cells: list[dict] = field(default_factory=list)
    averages: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "detector": self.detector,
            "mae": self.mae,
            "r2": self.r2,
            "baseline_mae": self.baseline_mae,
            "mae_snapped": self.mae_snapped,
            "averages": self.averages,
            "cells": self.cells,
        }


def _nan_to_none(x: float):
    return None if x is None or not math.isfinite(x) else float(x)


def lodo_evaluate(rows: Sequence[LodoRow], detector: str = "MD", *, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                  collinearity_threshold: float | None = COLLINEARITY_THRESHOLD, grid=None) -> LodoReport:
    """Leave-one-dataset-out evaluation of the beta regressor.

    For each OOD dataset, the regressor is trained on the rows of every
    other dataset and predicts ``beta_hat`` for each model on the held-out
    one. ``beta_hat`` is snapped to the sweep grid before its FPR is read
    off the sweep curve. MAE and R^2 use the raw predictions; the
    constant baseline predicts the training-fold mean of ``beta*``.
    """
    detector = check_detector(detector)
    datasets = sorted({r.dataset for r in rows})
    if len(datasets) < 2:
        raise DataError("LODO needs >= 2 distinct OOD datasets")
    names = common_feature_names([r.features for r in rows])
    default = default_grid() if grid is None else ensure_baselines(grid)
    preds = np.full(len(rows), np.nan)
    base = np.full(len(rows), np.nan)
    for ds in datasets:
        train_idx = [i for i, r in enumerate(rows) if r.dataset != ds]
        test_idx = [i for i, r in enumerate(rows) if r.dataset == ds]
        if not train_idx:
            raise DataError(f"fold {ds!r} has no training rows")
        y = np.array([rows[i].beta_star for i in train_idx])
        X = _matrix([rows[i].features for i in train_idx], names)
        reg = BetaRegressor(ridge_lambda, collinearity_threshold).fit(X, y, names)
        preds[test_idx] = reg.predict(_matrix([rows[i].features for i in test_idx], names))
        base[test_idx] = y.mean()
    target = np.array([r.beta_star for r in rows])
    ss_tot = float(((target - target.mean()) ** 2).sum())
    ss_res = float(((target - preds) ** 2).sum())
    cells = []
    snapped_err = []
    for r, b_hat in zip(rows, preds):
        sweep = r.sweep
        grid_r = sweep.grid if sweep is not None else default
        b_snap = float(grid_r[int(np.argmin(np.abs(grid_r - b_hat)))])
        snapped_err.append(abs(b_snap - r.beta_star))
        fpr = (lambda b: sweep.fpr_at(b)) if sweep is not None else (lambda b: float("nan"))
        cells.append({
            "model": r.model,
            "dataset": r.dataset,
            "beta_star": float(r.beta_star),
            "beta_hat": float(b_hat),
            "beta_hat_snapped": b_snap,
            "fpr_star": _nan_to_none(fpr(r.beta_star)),
            "fpr_hat": _nan_to_none(fpr(b_snap)),
            "fpr_0": _nan_to_none(fpr(0.0)),
            "fpr_1": _nan_to_none(fpr(1.0)),
        })
    averages = {}
    for key in ("fpr_star", "fpr_hat", "fpr_0", "fpr_1"):
        vals = [c[key] for c in cells if c[key] is not None]
        averages[key] = float(np.mean(vals)) if vals else None
    return LodoReport(
        detector=detector,
        mae=float(np.mean(np.abs(preds - target))),
        r2=1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"),
        baseline_mae=float(np.mean(np.abs(base - target))),
        mae_snapped=float(np.mean(snapped_err)),
        cells=cells,
        averages=averages,
    )
