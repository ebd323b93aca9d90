"""Mahalanobis-family OOD scores (MD, MMD, RMD) computed in the eigenbasis.

For an eigendecomposition ``Sigma = U diag(lambda) U^T`` the squared
Mahalanobis distance is ``sum_i (u_i^T (z - mu))^2 / lambda_i``. Every
score here goes through that per-direction sum, which is what makes the
per-dimension separation and the truncated (ablated) distances possible.

Scores are confidences: higher means more in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from geood.embeddings_io import EmbeddingSet, Role
from geood.evaluation import fpr_at_tpr, tpr_threshold
from geood.exceptions import DataError
from geood.gaussian import EigenSystem, GaussianModel, fit_gaussian
from geood.validation import check_detector, check_features


@dataclass(frozen=True, eq=False)
class ScoreVector:
    scores: np.ndarray
    detector: str
    per_class_distances: np.ndarray | None = None
    argmin_class: np.ndarray | None = None

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True, eq=False)
class SeparationProfile:
    separation: np.ndarray
    detector: str
    eigenvalues: np.ndarray


@dataclass(frozen=True, eq=False)
class AblationCurve:
    direction: str
    fpr_at_k: np.ndarray
    detector: str

    @property
    def ks(self) -> np.ndarray:
        return np.arange(1, self.fpr_at_k.shape[0] + 1)


def _features(data, dim: int) -> np.ndarray:
    X = data.features if isinstance(data, EmbeddingSet) else data
    return check_features(X, expected_dim=dim)


def _contributions(XU: np.ndarray, mean_u: np.ndarray, eigenvalues: np.ndarray) -> np.ndarray:
    """Per-direction terms ``(u_i^T (z - mu))^2 / lambda_i``, shape (N, d)."""
    diff = XU - mean_u
    return diff * diff / eigenvalues


def class_distances(model: GaussianModel, X: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance of every row to every class mean, shape (N, K)."""
    eig = model.tied_eig
    XU = X @ eig.eigenvectors
    MU = model.class_means @ eig.eigenvectors
    out = np.empty((X.shape[0], model.n_classes))
    for k in range(model.n_classes):
        out[:, k] = _contributions(XU, MU[k], eig.eigenvalues).sum(axis=1)
    return out


def marginal_distances(model: GaussianModel, X: np.ndarray) -> np.ndarray:
    eig = model.global_eig
    return _contributions(X @ eig.eigenvectors, model.global_mean @ eig.eigenvectors, eig.eigenvalues).sum(axis=1)


def md_scores(model: GaussianModel, data) -> ScoreVector:
    """``-min_k MD_k`` with the tied covariance."""
    X = _features(data, model.dim)
    dist = class_distances(model, X)
    arg = np.argmin(dist, axis=1)
    return ScoreVector(-dist[np.arange(X.shape[0]), arg], "MD", dist, arg)


def mmd_scores(model: GaussianModel, data) -> ScoreVector:
    """``-MD_0``: distance to the single global Gaussian."""
    X = _features(data, model.dim)
    d0 = marginal_distances(model, X)
    return ScoreVector(-d0, "MMD", None, np.full(X.shape[0], -1))


def rmd_scores(model: GaussianModel, data) -> ScoreVector:
    """``-min_k (MD_k - MD_0)``; ``per_class_distances`` holds ``MD_k - MD_0``."""
    X = _features(data, model.dim)
    dist = class_distances(model, X)
    d0 = marginal_distances(model, X)
    arg = np.argmin(dist, axis=1)
    md_min = dist[np.arange(X.shape[0]), arg]
    return ScoreVector(-(md_min - d0), "RMD", dist - d0[:, None], arg)


_SCORERS = {"MD": md_scores, "MMD": mmd_scores, "RMD": rmd_scores}


def score(model: GaussianModel, data, detector: str = "MD") -> ScoreVector:
    return _SCORERS[check_detector(detector)](model, data)


def _basis(model: GaussianModel, detector: str) -> EigenSystem:
    return model.global_eig if detector == "MMD" else model.tied_eig


def per_dimension_separation(model: GaussianModel, id_set, ood_set, detector: str = "MD") -> SeparationProfile:
    """Mean per-eigendirection contribution on OOD minus the same on ID.

    For MD/RMD the reference mean of each sample is its nearest class under
    the full-spectrum distance, in the tied eigenbasis; MMD uses the global
    mean and the global eigenbasis.
    """
    detector = check_detector(detector)
    eig = _basis(model, detector)

    def mean_contrib(data) -> np.ndarray:
        X = _features(data, model.dim)
        XU = X @ eig.eigenvectors
        if detector == "MMD":
            ref = model.global_mean @ eig.eigenvectors
        else:
            nearest = np.argmin(class_distances(model, X), axis=1)
            ref = (model.class_means @ eig.eigenvectors)[nearest]
        return _contributions(XU, ref, eig.eigenvalues).mean(axis=0)

    return SeparationProfile(mean_contrib(ood_set) - mean_contrib(id_set), detector, eig.eigenvalues.copy())


def _truncated_distances(X: np.ndarray, means: np.ndarray, eig: EigenSystem, order: np.ndarray) -> np.ndarray:
    """Minimum over ``means`` of cumulative distance sums along ``order``, shape (N, d)."""
    XU = (X @ eig.eigenvectors)[:, order]
    MU = (means @ eig.eigenvectors)[:, order]
    lam = eig.eigenvalues[order]
    best = None
    for mu in MU:
        cum = np.cumsum(_contributions(XU, mu, lam), axis=1)
        best = cum if best is None else np.minimum(best, cum)
    return best


def truncated_scores(model: GaussianModel, data, detector: str, direction: str = "forward") -> np.ndarray:
    """Confidence scores for every truncation level K = 1..d, shape (N, d).

    Forward keeps the K largest-variance directions, backward the K
    smallest. Column ``d-1`` is the full-spectrum score.
    """
    detector = check_detector(detector)
    if direction not in ("forward", "backward"):
        raise DataError(f"direction must be 'forward' or 'backward', got {direction!r}")
    X = _features(data, model.dim)
    order = np.arange(model.dim)
    if direction == "backward":
        order = order[::-1]
    if detector == "MMD":
        trunc = _truncated_distances(X, model.global_mean[None, :], model.global_eig, order)
    else:
        trunc = _truncated_distances(X, model.class_means, model.tied_eig, order)
        if detector == "RMD":
            trunc = trunc - _truncated_distances(X, model.global_mean[None, :], model.global_eig, order)
    out = -trunc
    # K = d is the full sum; use the detector's own summation so both agree bit for bit
    out[:, -1] = score(model, X, detector).scores
    return out


def dimension_ablation(model: GaussianModel, id_set, ood_set, detector: str = "MD",
                       direction: str = "forward", tpr_target: float = 0.95) -> AblationCurve:
    """FPR@TPR as a function of how many eigendirections enter the distance."""
    detector = check_detector(detector)
    id_t = truncated_scores(model, id_set, detector, direction)
    ood_t = truncated_scores(model, ood_set, detector, direction)
    fpr = np.array([fpr_at_tpr(id_t[:, j], ood_t[:, j], tpr_target).fpr for j in range(model.dim)])
    return AblationCurve(direction, fpr, detector)


class MahalanobisDetector(OutlierMixin, BaseEstimator):
    """Tied-covariance Mahalanobis OOD detector with an sklearn interface.

    Parameters
    ----------
    detector : {"MD", "RMD", "MMD"}
    eps_scale : float
        Ridge added to both covariances, relative to their mean diagonal.
    tpr_target : float
        Fraction of training samples kept as inliers by :meth:`predict`.

    Attributes
    ----------
    model_ : GaussianModel
    threshold_ : float
        Score threshold used by :meth:`predict`.
    """

    def __init__(self, detector: str = "MD", eps_scale: float = 1e-6, tpr_target: float = 0.95):
        self.detector = detector
        self.eps_scale = eps_scale
        self.tpr_target = tpr_target

    def fit(self, X, y=None):
        X = check_features(X)
        y = np.zeros(X.shape[0], dtype=np.int64) if y is None else np.asarray(y)
        self.model_ = fit_gaussian(EmbeddingSet(X, y, "train", Role.TRAIN), self.eps_scale)
        self.n_features_in_ = X.shape[1]
        self.threshold_ = tpr_threshold(self.score_samples(X), self.tpr_target)
        return self

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return score(self.model_, check_features(X, expected_dim=self.n_features_in_), self.detector).scores

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1, -1)
