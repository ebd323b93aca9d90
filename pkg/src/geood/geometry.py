"""Spectral and manifold geometry metrics of an embedding set.

Logs are natural logs throughout. Metrics that need positive eigenvalues
(entropy, log-domain fits, condition number) ignore eigenvalues at or
below ``1e-12 * lambda_1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.neighbors import NearestNeighbors

from geood.embeddings_io import EmbeddingSet
from geood.exceptions import ComputationError, DataError
from geood.gaussian import ScatterTriple, compute_scatter, eigendecompose

EIG_FLOOR = 1e-12
LID_K_VALUES = (10, 25, 50, 100)
DEFAULT_ID_K = 20
EXACT_KNN_LIMIT = 20_000
SHIFT_MAX_LEN = 512
MATRIX_SOURCES = ("C", "S_w", "S_b")


@dataclass
class GeometryReport:
    """Scalar geometry summary for one (embedding set, scatter matrix) pair.

    ``None`` marks a metric that is undefined for this input (for example
    the spectral gap when fewer than 6 eigenvalues exist). ``flags`` lists
    why.
    """

    matrix_source: str
    total_variance: float
    effective_rank: float
    participation_ratio: float
    condition_number: float
    spectral_gap: float | None
    entropy: float
    avg_log_decay_top20: float
    slope: float
    beta_power_law: float
    dim_90_var: int
    n_positive: int
    intrinsic_dim: float | None = None
    lid_mean: dict[int, float] = field(default_factory=dict)
    fisher_ratio_traces: float | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def fisher_ratio(self) -> float | None:
        return self.fisher_ratio_traces

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lid_mean"] = {str(k): v for k, v in self.lid_mean.items()}
        return doc

    def to_flat_dict(self, prefix: str | None = None) -> dict[str, float]:
        """Numeric metrics keyed ``<source>.<metric>`` (set-level ones unprefixed)."""
        p = f"{self.matrix_source}." if prefix is None else prefix
        out = {}
        for key in SPECTRAL_KEYS:
            val = getattr(self, key)
            if val is not None:
                out[p + key] = float(val)
        return out


SPECTRAL_KEYS = (
    "total_variance", "effective_rank", "participation_ratio", "condition_number",
    "spectral_gap", "entropy", "avg_log_decay_top20", "slope", "beta_power_law", "dim_90_var",
)

GEOMETRY_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["matrix_source", *SPECTRAL_KEYS, "n_positive", "intrinsic_dim", "lid_mean",
                 "fisher_ratio_traces", "flags"],
    "properties": {
        "matrix_source": {"enum": list(MATRIX_SOURCES)},
        "total_variance": {"type": "number", "minimum": 0},
        "effective_rank": {"type": "number", "minimum": 1},
        "participation_ratio": {"type": "number", "minimum": 1},
        "condition_number": {"type": "number", "minimum": 1},
        "spectral_gap": {"type": ["number", "null"]},
        "entropy": {"type": "number", "minimum": 0},
        "avg_log_decay_top20": {"type": "number"},
        "slope": {"type": "number"},
        "beta_power_law": {"type": "number"},
        "dim_90_var": {"type": "integer", "minimum": 1},
        "n_positive": {"type": "integer", "minimum": 1},
        "intrinsic_dim": {"type": ["number", "null"]},
        "lid_mean": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
        "fisher_ratio_traces": {"type": ["number", "null"]},
        "flags": {"type": "array", "items": {"type": "string"}},
        "model_name": {"type": "string"},
        "dataset": {"type": "string"},
    },
}


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def spectrum_metrics(eigenvalues, matrix_source: str = "C") -> GeometryReport:
    """Spectral summaries of a descending, non-negative eigenvalue vector."""
    lam = np.asarray(eigenvalues, dtype=np.float64).ravel()
    if lam.size == 0:
        raise DataError("empty spectrum")
    if np.any(lam < 0) or np.any(np.diff(lam) > 1e-12 * max(1.0, lam[0])):
        raise DataError("eigenvalues must be non-negative and sorted descending")
    if lam[0] <= 0:
        raise DataError("all-zero spectrum")
    flags = []
    total = float(lam.sum())
    pos = lam[lam > EIG_FLOOR * lam[0]]
    n_pos = pos.size
    idx = np.arange(1, n_pos + 1, dtype=np.float64)
    log_pos = np.log(pos)
    p = pos / pos.sum()
    entropy = float(-(p * np.log(p)).sum())
    if lam.size >= 6:
        gap = float(lam[0] - lam[5])
    else:
        gap = None
        flags.append("spectral_gap_undefined_d_lt_6")
    top = log_pos[:20]
    if top.size < 20:
        flags.append(f"decay_prefix_{top.size}")
    decay = float(np.mean(top[:-1] - top[1:])) if top.size >= 2 else 0.0
    cum = np.cumsum(lam) / total
    dim90 = int(np.searchsorted(cum, 0.9 - 1e-12) + 1)
    return GeometryReport(
        matrix_source=matrix_source,
        total_variance=total,
        effective_rank=total / float(lam[0]),
        participation_ratio=total**2 / float((lam**2).sum()),
        condition_number=float(pos[0] / pos[-1]),
        spectral_gap=gap,
        entropy=max(entropy, 0.0),
        avg_log_decay_top20=decay,
        slope=_ols_slope(idx, log_pos),
        beta_power_law=-_ols_slope(np.log(idx), log_pos),
        dim_90_var=min(dim90, lam.size),
        n_positive=int(n_pos),
        flags=flags,
    )


# -- nearest-neighbour based estimators ---------------------------------------

@dataclass(frozen=True)
class LIDResult:
    per_point: np.ndarray  # NaN where skipped
    k: int

    @property
    def n_skipped(self) -> int:
        return int(np.count_nonzero(np.isnan(self.per_point)))

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.per_point))


def knn_distances(X: np.ndarray, k: int, n_jobs: int | None = None) -> np.ndarray:
    """Distances to the ``k`` nearest other points, ascending, shape (N, k).

    Exact brute force below ``EXACT_KNN_LIMIT`` rows, a ball tree above.
    A point never counts as its own neighbour, duplicates do.
    """
    n = X.shape[0]
    if n <= k:
        raise DataError(f"need more than k={k} points, got {n}")
    algorithm = "brute" if n < EXACT_KNN_LIMIT else "ball_tree"
    nn = NearestNeighbors(n_neighbors=k + 1, algorithm=algorithm, n_jobs=n_jobs).fit(X)
    dist, ind = nn.kneighbors(X)
    own = ind == np.arange(n)[:, None]
    # a duplicate may displace the point itself from column 0; drop the self entry, or the last one
    missing = ~own.any(axis=1)
    own[missing, -1] = True
    return dist[~own].reshape(n, k)


def lid_from_distances(dist: np.ndarray) -> np.ndarray:
    """Per-point MLE ``-[(1/k) sum_j log(r_j / r_k)]^-1``; NaN for degenerate points."""
    k = dist.shape[1]
    rk = dist[:, -1:]
    ok = (dist[:, 0] > 0) & (rk[:, 0] > dist[:, 0])
    out = np.full(dist.shape[0], np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.log(dist[ok] / rk[ok]).sum(axis=1) / k
    out[ok] = -1.0 / s
    return out


def lid_per_point(es_or_X, k: int, n_jobs: int | None = None) -> LIDResult:
    X = es_or_X.features if isinstance(es_or_X, EmbeddingSet) else np.asarray(es_or_X, dtype=np.float64)
    res = LIDResult(lid_from_distances(knn_distances(X, k, n_jobs)), k)
    if res.n_skipped == X.shape[0]:
        raise ComputationError("every point is degenerate (identical neighbours); LID undefined")
    return res


def lid_estimates(es: EmbeddingSet, k_values: Sequence[int] = LID_K_VALUES, n_jobs: int | None = None) -> dict[int, float]:
    """Dataset-mean LID for each ``k``; degenerate points are skipped.

    One neighbour query with ``max(k_values)`` serves every ``k``.
    """
    k_values = sorted({int(k) for k in k_values})
    if not k_values or k_values[0] < 2:
        raise DataError("k values must be >= 2")
    dist = knn_distances(es.features, k_values[-1], n_jobs)
    out = {}
    for k in k_values:
        lid = lid_from_distances(dist[:, :k])
        if np.all(np.isnan(lid)):
            raise ComputationError("every point is degenerate (identical neighbours); LID undefined")
        out[k] = float(np.nanmean(lid))
    return out


def intrinsic_dimension(es: EmbeddingSet, k: int = DEFAULT_ID_K, n_jobs: int | None = None) -> float:
    """Global MLE intrinsic dimension: harmonic mean of per-point LID_k."""
    lid = lid_per_point(es, k, n_jobs).per_point
    lid = lid[np.isfinite(lid)]
    return float(1.0 / np.mean(1.0 / lid))


# -- scatter based ---------------------------------------------------------------

@dataclass(frozen=True)
class SpectralShift:
    shifts: np.ndarray
    matrix_source: str = "C"
    eval_role: str = "validation"
    n_dropped: int = 0


def spectral_shift(train_eigs, eval_eigs, *, matrix_source: str = "C", eval_role: str = "validation",
                   max_len: int | None = SHIFT_MAX_LEN) -> SpectralShift:
    """Relative eigenvalue change ``(eval - train) / train`` per index.

    Only the leading ``max_len`` eigenvalues are compared; indices whose
    train eigenvalue is at or below the floor are dropped and counted.
    """
    tr = np.asarray(train_eigs, dtype=np.float64).ravel()
    ev = np.asarray(eval_eigs, dtype=np.float64).ravel()
    if tr.shape != ev.shape:
        raise DataError(f"eigenvalue vectors differ in length ({tr.size} vs {ev.size})")
    if max_len is not None:
        tr, ev = tr[:max_len], ev[:max_len]
    floor = EIG_FLOOR * (tr.max() if tr.size and tr.max() > 0 else 1.0)
    keep = tr > floor
    return SpectralShift((ev[keep] - tr[keep]) / tr[keep], matrix_source, eval_role, int((~keep).sum()))


def fisher_ratio(scatter: ScatterTriple) -> float:
    """``trace(S_b) / trace(S_w)``."""
    if not scatter.has_class_scatter:
        raise DataError("fisher ratio needs a labeled set")
    tw = float(np.trace(scatter.S_w))
    if tw <= 0:
        raise ComputationError("within-class scatter has zero trace")
    return float(np.trace(scatter.S_b)) / tw


def spectrum_slope(M) -> float:
    return spectrum_metrics(eigendecompose(M).eigenvalues).slope


def combined_lid_slope(es: EmbeddingSet, scatter: ScatterTriple, k: int = DEFAULT_ID_K,
                       n_jobs: int | None = None) -> float:
    """Signed product of mean LID_k and the log-spectrum slope of ``S_w``."""
    if not scatter.has_class_scatter:
        raise DataError("combined metric needs within-class scatter")
    slope = spectrum_slope(scatter.S_w)
    if slope == 0.0:
        return 0.0
    return lid_estimates(es, [k], n_jobs)[k] * slope


def scatter_spectra(scatter: ScatterTriple) -> dict[str, np.ndarray]:
    out = {"C": eigendecompose(scatter.C).eigenvalues}
    if scatter.has_class_scatter:
        out["S_w"] = eigendecompose(scatter.S_w).eigenvalues
        out["S_b"] = eigendecompose(scatter.S_b).eigenvalues
    return out


def geometry_reports(es: EmbeddingSet, *, k_values: Sequence[int] = LID_K_VALUES, id_k: int = DEFAULT_ID_K,
                     n_jobs: int | None = None) -> dict[str, GeometryReport]:
    """Full report for each available matrix source of ``es``.

    Set-level quantities (LID, intrinsic dimension, Fisher ratio) are
    shared by all reports. LID values for ``k >= N`` are left out.
    """
    scatter = compute_scatter(es)
    spectra = scatter_spectra(scatter)
    usable = [k for k in k_values if k < es.n_samples]
    lids = lid_estimates(es, usable, n_jobs) if usable else {}
    id_est = intrinsic_dimension(es, id_k, n_jobs) if id_k < es.n_samples else None
    fr = fisher_ratio(scatter) if scatter.has_class_scatter and np.trace(scatter.S_w) > 0 else None
    reports = {}
    for source, lam in spectra.items():
        if lam[0] <= 0:
            continue
        rep = spectrum_metrics(lam, source)
        rep.lid_mean = dict(lids)
        rep.intrinsic_dim = id_est
        rep.fisher_ratio_traces = fr
        reports[source] = rep
    return reports


def regression_features(reports: dict[str, GeometryReport]) -> dict[str, float]:
    """Flatten reports into the feature mapping used by the beta regressor."""
    feats: dict[str, float] = {}
    any_rep = None
    for source in MATRIX_SOURCES:
        rep = reports.get(source)
        if rep is None:
            continue
        any_rep = rep
        feats.update(rep.to_flat_dict())
    if any_rep is not None:
        for k, v in sorted(any_rep.lid_mean.items()):
            feats[f"lid_{k}"] = float(v)
        if any_rep.intrinsic_dim is not None:
            feats["intrinsic_dim"] = float(any_rep.intrinsic_dim)
        if any_rep.fisher_ratio_traces is not None:
            feats["fisher_ratio_traces"] = float(any_rep.fisher_ratio_traces)
        s_w = reports.get("S_w")
        lid = any_rep.lid_mean.get(25) or next(iter(any_rep.lid_mean.values()), None)
        if s_w is not None and lid is not None:
            feats["lid_x_slope"] = float(lid * s_w.slope)
    return {k: v for k, v in feats.items() if math.isfinite(v)}


def spectral_ratio_curves(train_scatter: ScatterTriple, eval_scatter: ScatterTriple | None = None,
                          max_len: int = SHIFT_MAX_LEN) -> dict[str, np.ndarray]:
    """Per-index eigenvalue ratios S_b/S_w (train) and C_eval/C_train."""
    spectra = scatter_spectra(train_scatter)
    out = {}
    if "S_w" in spectra:
        sw, sb = spectra["S_w"][:max_len], spectra["S_b"][:max_len]
        keep = sw > EIG_FLOOR * sw[0]
        out["S_b/S_w"] = sb[keep] / sw[keep]
    if eval_scatter is not None:
        c_tr = spectra["C"][:max_len]
        c_ev = eigendecompose(eval_scatter.C).eigenvalues[:max_len]
        keep = c_tr > EIG_FLOOR * c_tr[0]
        out["C_eval/C_train"] = c_ev[keep] / c_tr[keep]
    return out
