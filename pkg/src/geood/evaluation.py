"""Detection metrics and the metric <-> performance correlation study."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from geood.exceptions import DataError
from geood.validation import check_scores

# tolerance when turning tpr_target * n_id into an integer count
_COUNT_SLACK = 1e-9


@dataclass(frozen=True)
class DetectionResult:
    fpr_at_95tpr: float
    auroc: float
    threshold: float
    n_id: int
    n_ood: int
    tpr_target: float = 0.95

    @property
    def fpr(self) -> float:
        return self.fpr_at_95tpr


def tpr_threshold(id_scores, tpr_target: float = 0.95) -> float:
    """Largest threshold keeping at least ``tpr_target`` of ID scores (``>=``, inclusive).

    That is the ``ceil(tpr_target * n_id)``-th largest ID score.
    """
    ids = np.sort(check_scores(id_scores, "id_scores"))
    if not 0.0 < tpr_target <= 1.0:
        raise DataError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    n = ids.size
    keep = min(n, max(1, math.ceil(tpr_target * n - _COUNT_SLACK)))
    return float(ids[n - keep])


def auroc(id_scores, ood_scores) -> float:
    """Probability that an ID score exceeds an OOD score; ties count one half."""
    ids = check_scores(id_scores, "id_scores")
    ood = check_scores(ood_scores, "ood_scores")
    ranks = rankdata(np.concatenate([ids, ood]))
    n_id, n_ood = ids.size, ood.size
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2
    return float(u / (n_id * n_ood))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> DetectionResult:
    """FPR on OOD samples at the threshold that keeps ``tpr_target`` of ID samples.

    Higher scores mean "more in-distribution". A sample is accepted as ID
    when ``score >= threshold``.
    """
    ids = check_scores(id_scores, "id_scores")
    ood = check_scores(ood_scores, "ood_scores")
    tau = tpr_threshold(ids, tpr_target)
    fpr = float(np.count_nonzero(ood >= tau)) / ood.size
    return DetectionResult(fpr, auroc(ids, ood), tau, ids.size, ood.size, tpr_target)


# -- correlation ---------------------------------------------------------------

def pearson(x, y) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.clip((xc @ yc) / math.sqrt(float(xc @ xc) * float(yc @ yc)), -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    return pearson(rankdata(x), rankdata(y))


@dataclass(frozen=True)
class CorrelationTable:
    """Per (metric, detector) Spearman and Pearson correlations.

    Undefined cells (fewer than 3 pairs or a constant column) are NaN.
    """

    metrics: tuple[str, ...]
    detectors: tuple[str, ...]
    spearman: np.ndarray
    pearson: np.ndarray
    n: np.ndarray

    def cell(self, metric: str, detector: str, method: str = "spearman") -> float:
        i = self.metrics.index(metric)
        j = self.detectors.index(detector)
        return float(getattr(self, method)[i, j])

    def to_rows(self, method: str = "spearman") -> list[dict]:
        table = getattr(self, method)
        rows = []
        for i, m in enumerate(self.metrics):
            row = {"metric": m}
            for j, det in enumerate(self.detectors):
                row[det] = float(table[i, j])
            rows.append(row)
        return rows


def _as_metric_dict(report) -> Mapping[str, float]:
    if isinstance(report, Mapping):
        return report
    if hasattr(report, "to_flat_dict"):
        return report.to_flat_dict()
    raise DataError(f"cannot interpret {type(report).__name__} as a metric mapping")


def correlate(
    metrics: Sequence,
    performance: Mapping[str, Sequence[float]] | Sequence[float],
    method: str | None = None,
    *,
    min_pairs: int = 3,
) -> CorrelationTable:
    """Correlate per-model geometry metrics with per-model detection FPR.

    Args:
        metrics: one metric mapping (or ``GeometryReport``) per model.
        performance: per-model FPR list, or a mapping detector -> list.
        method: ignored for computation (both methods are always filled);
            kept for call-site readability.
        min_pairs: cells with fewer aligned, finite pairs are NaN.

    Missing or non-finite metric values are excluded pairwise.
    """
    if method not in (None, "spearman", "pearson"):
        raise DataError(f"unknown correlation method {method!r}")
    dicts = [_as_metric_dict(m) for m in metrics]
    if not isinstance(performance, Mapping):
        performance = {"fpr": performance}
    n_models = len(dicts)
    for det, perf in performance.items():
        if len(perf) != n_models:
            raise DataError(f"performance for {det} has {len(perf)} entries, expected {n_models}")
    if n_models < min_pairs:
        raise DataError(f"correlation needs >= {min_pairs} models, got {n_models}")
    names: list[str] = []
    for d in dicts:
        for key, val in d.items():
            if key not in names and _is_number(val):
                names.append(key)
    dets = tuple(performance)
    rho_s = np.full((len(names), len(dets)), np.nan)
    rho_p = np.full((len(names), len(dets)), np.nan)
    counts = np.zeros((len(names), len(dets)), dtype=np.int64)
    for i, name in enumerate(names):
        col = np.array([_to_float(d.get(name)) for d in dicts])
        for j, det in enumerate(dets):
            perf = np.asarray(performance[det], dtype=np.float64)
            ok = np.isfinite(col) & np.isfinite(perf)
            counts[i, j] = int(ok.sum())
            if counts[i, j] < min_pairs:
                continue
            rho_s[i, j] = spearman(col[ok], perf[ok])
            rho_p[i, j] = pearson(col[ok], perf[ok])
    return CorrelationTable(tuple(names), dets, rho_s, rho_p, counts)


def _is_number(val) -> bool:
    return isinstance(val, (int, float, np.integer, np.floating)) and not isinstance(val, bool)


def _to_float(val) -> float:
    return float(val) if _is_number(val) else float("nan")


@dataclass
class CombinedStudyResult:
    detector: str
    spearman: float
    pearson: float
    n: int
    points: list[dict] = field(default_factory=list)


def combined_metric_study(experiments: Sequence, detector: str = "MD", *, k: int = 20,
                          eps_scale: float = 1e-6) -> CombinedStudyResult:
    """Correlate ``|mean LID_k x slope(S_w)|`` with detector FPR across models.

    Each experiment needs ``train``, ``id_eval`` and ``ood`` embedding sets
    (``ood`` may be a mapping name -> set; FPRs are then averaged with equal
    weight) and optionally a ``name``.
    """
    from geood.detectors import score  # local import: detectors depends on this module
    from geood.gaussian import compute_scatter, fit_gaussian
    from geood.geometry import combined_lid_slope

    if len(experiments) < 3:
        raise DataError(f"combined metric study needs >= 3 models, got {len(experiments)}")
    points = []
    for i, exp in enumerate(experiments):
        model = fit_gaussian(exp.train, eps_scale)
        id_scores = score(model, exp.id_eval, detector).scores
        oods = exp.ood if isinstance(exp.ood, Mapping) else {"ood": exp.ood}
        fprs = [fpr_at_tpr(id_scores, score(model, o, detector).scores).fpr for o in oods.values()]
        product = combined_lid_slope(exp.train, compute_scatter(exp.train), k)
        points.append({
            "model": getattr(exp, "name", f"model_{i}"),
            "lid_slope": product,
            "abs_lid_slope": abs(product),
            "fpr": float(np.mean(fprs)),
        })
    x = [p["abs_lid_slope"] for p in points]
    y = [p["fpr"] for p in points]
    return CombinedStudyResult(detector, spearman(x, y), pearson(x, y), len(points), points)
