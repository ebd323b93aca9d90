"""Class-conditional Gaussians with tied covariance, scatter matrices and whitening.

All covariances use 1/N normalization. With that convention the overall
covariance splits exactly into within-class and between-class scatter,
``C = S_w + S_b``, and the tied covariance of the detector is ``S_w``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from geood.embeddings_io import EmbeddingSet, Role
from geood.exceptions import ComputationError, DataError
from geood.validation import check_square_symmetric

DEFAULT_EPS_SCALE = 1e-6


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Eigenvalues in descending order and matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * self.eigenvalues) @ U.T


@dataclass(frozen=True, eq=False)
class ScatterTriple:
    """Overall covariance ``C`` plus within/between-class scatter.

    ``S_w`` and ``S_b`` are ``None`` for sets with unlabeled rows.
    """

    C: np.ndarray
    S_w: np.ndarray | None
    S_b: np.ndarray | None

    @property
    def has_class_scatter(self) -> bool:
        return self.S_w is not None


@dataclass(frozen=True, eq=False)
class RadialTransform:
    """Whitening + radial map captured at fit time of a beta pipeline."""

    W: np.ndarray
    center: np.ndarray
    beta: float
    whitening_source: str
    mean_mode: str = "refit"
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", transform_fingerprint(self.W, self.center, self.beta))


def transform_fingerprint(W: np.ndarray, center: np.ndarray, beta: float) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(W, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(center, dtype=np.float64).tobytes())
    h.update(np.float64(beta).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class GaussianModel:
    """Fitted class means, tied covariance and global Gaussian.

    ``tied_cov`` and ``global_cov`` already include the ridge term
    ``eps * I``; the eigensystems are of the regularized matrices.
    """

    class_means: np.ndarray
    tied_cov: np.ndarray
    global_mean: np.ndarray
    global_cov: np.ndarray
    class_counts: np.ndarray
    eps_scale: float
    tied_eps: float
    global_eps: float
    tied_eig: EigenSystem = field(repr=False)
    global_eig: EigenSystem = field(repr=False)
    transform: RadialTransform | None = None

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def regularization_eps(self) -> tuple[float, float]:
        return self.tied_eps, self.global_eps


def compute_scatter(es: EmbeddingSet) -> ScatterTriple:
    """Overall covariance, within-class and between-class scatter (1/N weighting)."""
    X = es.features
    n = X.shape[0]
    mu = X.mean(axis=0)
    Xc = X - mu
    C = Xc.T @ Xc / n
    C = (C + C.T) / 2
    if not es.is_labeled:
        return ScatterTriple(C, None, None)
    d = X.shape[1]
    S_w = np.zeros((d, d))
    S_b = np.zeros((d, d))
    for k in np.unique(es.labels):
        Xk = X[es.labels == k]
        mk = Xk.mean(axis=0)
        R = Xk - mk
        S_w += R.T @ R
        diff = mk - mu
        S_b += Xk.shape[0] * np.outer(diff, diff)
    S_w = (S_w + S_w.T) / (2 * n)
    S_b = (S_b + S_b.T) / (2 * n)
    return ScatterTriple(C, S_w, S_b)


def eigendecompose(M, *, neg_tol: float = 1e-10) -> EigenSystem:
    """Symmetric eigendecomposition with eigenvalues sorted descending.

    ``M`` is symmetrized first. Negative eigenvalues down to
    ``-neg_tol * max(1, max|M|)`` are rounding noise and clamped to zero;
    anything more negative is rejected.
    """
    M = check_square_symmetric(M)
    M = (M + M.T) / 2
    try:
        vals, vecs = linalg.eigh(M)
    except linalg.LinAlgError as exc:
        raise ComputationError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(vals, kind="stable")[::-1]
    vals = vals[order]
    vecs = np.ascontiguousarray(vecs[:, order])
    floor = -neg_tol * max(1.0, float(np.max(np.abs(M))))
    if vals[-1] < floor:
        raise ComputationError(f"matrix is not positive semi-definite (eigenvalue {vals[-1]:.3e})")
    vals = np.clip(vals, 0.0, None)
    return EigenSystem(vals, vecs)


def _regularize(M: np.ndarray, eps_scale: float) -> tuple[np.ndarray, float]:
    mean_diag = float(np.mean(np.diag(M)))
    # all-zero scatter (e.g. no intra-class spread): fall back to an absolute floor
    eps = eps_scale * mean_diag if mean_diag > 0 else eps_scale
    return M + eps * np.eye(M.shape[0]), eps


def fit_gaussian(train: EmbeddingSet, eps_scale: float = DEFAULT_EPS_SCALE) -> GaussianModel:
    """Fit class means, tied covariance ``S_w`` and the global Gaussian.

    Both covariances are ridge-regularized with ``eps = eps_scale * mean(diag)``.
    """
    if train.role is not Role.TRAIN:
        raise DataError("fit_gaussian expects a train set")
    if eps_scale < 0:
        raise DataError("eps_scale must be non-negative")
    X, y = train.features, train.labels
    K = train.n_classes
    counts = np.bincount(y, minlength=K)
    if np.any(counts == 0):
        raise DataError(f"class {int(np.flatnonzero(counts == 0)[0])} is empty")
    means = np.stack([X[y == k].mean(axis=0) for k in range(K)])
    scatter = compute_scatter(train)
    tied, tied_eps = _regularize(scatter.S_w, eps_scale)
    glob, glob_eps = _regularize(scatter.C, eps_scale)
    return GaussianModel(
        class_means=means,
        tied_cov=tied,
        global_mean=X.mean(axis=0),
        global_cov=glob,
        class_counts=counts,
        eps_scale=float(eps_scale),
        tied_eps=tied_eps,
        global_eps=glob_eps,
        tied_eig=eigendecompose(tied),
        global_eig=eigendecompose(glob),
    )


def whitening_transform(model: GaussianModel, source: str = "global") -> tuple[np.ndarray, np.ndarray]:
    """Symmetric whitening matrix ``U diag(lambda^-1/2) U^T`` and its center.

    ``source="global"`` whitens with the global covariance, ``"tied"`` with
    the within-class scatter. The center is the global mean in both cases,
    since the tied model has no single mean of its own.
    """
    if source == "global":
        eig = model.global_eig
    elif source == "tied":
        eig = model.tied_eig
    else:
        raise DataError(f"unknown whitening source {source!r}")
    if np.any(eig.eigenvalues <= 0):
        raise ComputationError("covariance has a zero eigenvalue after regularization")
    U = eig.eigenvectors
    W = (U / np.sqrt(eig.eigenvalues)) @ U.T
    return (W + W.T) / 2, model.global_mean.copy()


# -- serialization -----------------------------------------------------------

def model_to_dict(model: GaussianModel) -> dict:
    doc = {
        "format": "geood.gaussian_model/1",
        "class_means": model.class_means.tolist(),
        "tied_cov": model.tied_cov.tolist(),
        "global_mean": model.global_mean.tolist(),
        "global_cov": model.global_cov.tolist(),
        "class_counts": model.class_counts.tolist(),
        "eps_scale": model.eps_scale,
        "tied_eps": model.tied_eps,
        "global_eps": model.global_eps,
        "tied_eigenvalues": model.tied_eig.eigenvalues.tolist(),
        "tied_eigenvectors": model.tied_eig.eigenvectors.tolist(),
        "global_eigenvalues": model.global_eig.eigenvalues.tolist(),
        "global_eigenvectors": model.global_eig.eigenvectors.tolist(),
        "transform": None,
    }
    t = model.transform
    if t is not None:
        doc["transform"] = {
            "W": t.W.tolist(),
            "center": t.center.tolist(),
            "beta": t.beta,
            "whitening_source": t.whitening_source,
            "mean_mode": t.mean_mode,
            "fingerprint": t.fingerprint,
        }
    return doc


def model_from_dict(doc: dict) -> GaussianModel:
    if doc.get("format") != "geood.gaussian_model/1":
        raise DataError("not a geood model document")
    arr = lambda key: np.asarray(doc[key], dtype=np.float64)  # noqa: E731
    t = doc.get("transform")
    transform = None
    if t is not None:
        transform = RadialTransform(
            W=np.asarray(t["W"], dtype=np.float64),
            center=np.asarray(t["center"], dtype=np.float64),
            beta=float(t["beta"]),
            whitening_source=t["whitening_source"],
            mean_mode=t.get("mean_mode", "refit"),
            fingerprint=t["fingerprint"],
        )
    return GaussianModel(
        class_means=arr("class_means"),
        tied_cov=arr("tied_cov"),
        global_mean=arr("global_mean"),
        global_cov=arr("global_cov"),
        class_counts=np.asarray(doc["class_counts"], dtype=np.int64),
        eps_scale=float(doc["eps_scale"]),
        tied_eps=float(doc["tied_eps"]),
        global_eps=float(doc["global_eps"]),
        tied_eig=EigenSystem(arr("tied_eigenvalues"), arr("tied_eigenvectors")),
        global_eig=EigenSystem(arr("global_eigenvalues"), arr("global_eigenvectors")),
        transform=transform,
    )


def save_model(model: GaussianModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model)) + "\n")
    return path


def load_model(path) -> GaussianModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid model JSON ({exc})") from exc
    return model_from_dict(doc)
