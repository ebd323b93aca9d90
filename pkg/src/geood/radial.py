"""Radially scaled l2 normalization and the whiten -> map -> refit -> score pipeline.

The map ``z -> z / ||z||**beta`` keeps directions and sends the radius ``r``
to ``r**(1 - beta)``: beta = 0 is the identity, beta = 1 projects onto the
unit sphere, beta < 0 expands radii and beta > 1 contracts large radii
harder than small ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from geood.detectors import ScoreVector, score
from geood.embeddings_io import EmbeddingSet, Role
from geood.evaluation import tpr_threshold
from geood.exceptions import ComputationError, DataError, FingerprintMismatch
from geood.gaussian import (
    DEFAULT_EPS_SCALE,
    GaussianModel,
    RadialTransform,
    fit_gaussian,
    transform_fingerprint,
    whitening_transform,
)
from geood.validation import check_features

ZERO_NORM_POLICIES = ("auto", "error", "passthrough")


@dataclass(frozen=True)
class RadialConfig:
    """Settings for the beta pipeline.

    ``zero_norm_policy="auto"`` means ``error`` for beta > 0 and
    ``passthrough`` otherwise. ``mean_mode="refit"`` uses means of the
    mapped features; ``"mapped"`` uses the mapped whitened class means.
    """

    beta: float = 1.0
    zero_norm_policy: str = "auto"
    whitening_source: str = "global"
    mean_mode: str = "refit"
    eps_scale: float = DEFAULT_EPS_SCALE

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise DataError("beta must be finite")
        if self.zero_norm_policy not in ZERO_NORM_POLICIES:
            raise DataError(f"unknown zero_norm_policy {self.zero_norm_policy!r}")
        if self.whitening_source not in ("global", "tied"):
            raise DataError(f"unknown whitening_source {self.whitening_source!r}")
        if self.mean_mode not in ("refit", "mapped"):
            raise DataError(f"unknown mean_mode {self.mean_mode!r}")


def _resolve_policy(policy: str, beta: float) -> str:
    if policy == "auto":
        return "error" if beta > 0 else "passthrough"
    if policy not in ZERO_NORM_POLICIES:
        raise DataError(f"unknown zero_norm_policy {policy!r}")
    return policy


def radial_map(z, beta: float, policy: str = "auto") -> np.ndarray:
    """Apply ``z / ||z||**beta`` to a vector or to every row of a matrix.

    Raises:
        DataError: a zero vector under the ``error`` policy.
        ComputationError: the result overflows or is otherwise non-finite.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DataError("radial_map input must be finite")
    policy = _resolve_policy(policy, beta)
    rows = np.atleast_2d(z)
    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0
    if zero.any() and policy == "error":
        raise DataError(f"zero-norm vector at row {int(np.flatnonzero(zero)[0])} (beta={beta})")
    if beta == 0:
        return z.copy()
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        factor = np.where(zero, 1.0, np.power(np.where(zero, 1.0, norms), -beta))
        out = rows * factor[:, None]
    if not np.all(np.isfinite(out)):
        raise ComputationError(f"radial_map produced non-finite output (beta={beta})")
    return out.reshape(z.shape)


def _transform_features(X: np.ndarray, t: RadialTransform, policy: str) -> np.ndarray:
    return radial_map((X - t.center) @ t.W.T, t.beta, policy)


def fit_beta_pipeline(train: EmbeddingSet, beta: float | None = None, cfg: RadialConfig | None = None) -> GaussianModel:
    """Whiten ``train``, map it through the radial transform and refit the Gaussians.

    The returned model lives in the transformed space and carries the
    whitening (``W``, center) plus a fingerprint of it in ``model.transform``.
    """
    cfg = cfg or RadialConfig()
    beta = cfg.beta if beta is None else float(beta)
    cfg = replace(cfg, beta=beta)
    base = fit_gaussian(train, cfg.eps_scale)
    W, center = whitening_transform(base, cfg.whitening_source)
    t = RadialTransform(W, center, beta, cfg.whitening_source, cfg.mean_mode)
    Z = _transform_features(train.features, t, cfg.zero_norm_policy)
    model = fit_gaussian(train.with_features(Z), cfg.eps_scale)
    if cfg.mean_mode == "mapped":
        whitened_means = (base.class_means - center) @ W.T
        mapped = radial_map(whitened_means, beta, cfg.zero_norm_policy)
        model = replace(model, class_means=mapped)
    return replace(model, transform=t)


def transform_set(model_beta: GaussianModel, data, policy: str = "auto") -> np.ndarray:
    """Map raw features into the space of a fitted beta-pipeline model."""
    t = model_beta.transform
    if t is None:
        raise DataError("model was not fitted with a beta pipeline")
    X = data.features if isinstance(data, EmbeddingSet) else data
    X = check_features(X, expected_dim=t.W.shape[1])
    return _transform_features(X, t, policy)


def score_beta_pipeline(model_beta: GaussianModel, data, beta: float | None = None,
                        cfg: RadialConfig | None = None, detector: str = "MD") -> ScoreVector:
    """Transform ``data`` exactly as at fit time, then score with ``detector``.

    Raises:
        FingerprintMismatch: the stored transform is inconsistent with its
            fingerprint, or ``beta`` / whitening source differ from fit time.
    """
    t = model_beta.transform
    if t is None:
        raise DataError("model was not fitted with a beta pipeline")
    if transform_fingerprint(t.W, t.center, t.beta) != t.fingerprint:
        raise FingerprintMismatch("stored whitening parameters do not match their fingerprint")
    if beta is not None and float(beta) != t.beta:
        raise FingerprintMismatch(f"model was fitted with beta={t.beta}, scoring requested beta={beta}")
    policy = "auto"
    if cfg is not None:
        if cfg.whitening_source != t.whitening_source:
            raise FingerprintMismatch(
                f"model was whitened with {t.whitening_source!r}, config asks for {cfg.whitening_source!r}"
            )
        policy = cfg.zero_norm_policy
    return score(model_beta, transform_set(model_beta, data, policy), detector)


class RadialScaler(TransformerMixin, BaseEstimator):
    """Whitening followed by the radial map, as an sklearn transformer.

    Parameters
    ----------
    beta : float
    whitening_source : {"global", "tied"}
        ``"tied"`` needs class labels in :meth:`fit`.
    eps_scale : float
    zero_norm_policy : {"auto", "error", "passthrough"}
    """

    def __init__(self, beta: float = 1.0, whitening_source: str = "global",
                 eps_scale: float = DEFAULT_EPS_SCALE, zero_norm_policy: str = "auto"):
        self.beta = beta
        self.whitening_source = whitening_source
        self.eps_scale = eps_scale
        self.zero_norm_policy = zero_norm_policy

    def fit(self, X, y=None):
        X = check_features(X)
        y = np.zeros(X.shape[0], dtype=np.int64) if y is None else np.asarray(y)
        base = fit_gaussian(EmbeddingSet(X, y, "train", Role.TRAIN), self.eps_scale)
        self.whitening_, self.center_ = whitening_transform(base, self.whitening_source)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "whitening_")
        X = check_features(X, expected_dim=self.n_features_in_)
        return radial_map((X - self.center_) @ self.whitening_.T, self.beta, self.zero_norm_policy)


class BetaMahalanobisDetector(OutlierMixin, BaseEstimator):
    """Mahalanobis detector on radially normalized, whitened features.

    ``beta=0`` reproduces the plain detector (up to the ridge term) and
    ``beta=1`` the unit-sphere normalization.
    """

    def __init__(self, beta: float = 1.0, detector: str = "MD", whitening_source: str = "global",
                 mean_mode: str = "refit", eps_scale: float = DEFAULT_EPS_SCALE, tpr_target: float = 0.95):
        self.beta = beta
        self.detector = detector
        self.whitening_source = whitening_source
        self.mean_mode = mean_mode
        self.eps_scale = eps_scale
        self.tpr_target = tpr_target

    def _config(self) -> RadialConfig:
        return RadialConfig(self.beta, "auto", self.whitening_source, self.mean_mode, self.eps_scale)

    def fit(self, X, y=None):
        X = check_features(X)
        y = np.zeros(X.shape[0], dtype=np.int64) if y is None else np.asarray(y)
        self.model_ = fit_beta_pipeline(EmbeddingSet(X, y, "train", Role.TRAIN), self.beta, self._config())
        self.n_features_in_ = X.shape[1]
        self.threshold_ = tpr_threshold(self.score_samples(X), self.tpr_target)
        return self

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return score_beta_pipeline(self.model_, X, self.beta, self._config(), self.detector).scores

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1, -1)
