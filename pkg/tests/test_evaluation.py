import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from geood.evaluation import (
    auroc,
    combined_metric_study,
    correlate,
    fpr_at_tpr,
    pearson,
    spearman,
    tpr_threshold,
)
from geood.exceptions import DataError
from geood.synth import SynthConfig, model_family

ID10 = [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]


def test_fpr_hand_enumeration():
    res = fpr_at_tpr(ID10, [0.5, 1.5, 0.9])
    assert res.threshold == 1.0
    assert res.fpr == 1 / 3
    assert (res.n_id, res.n_ood) == (10, 3)


def test_threshold_keeps_requested_fraction():
    assert tpr_threshold(ID10, 0.8) == 3.0
    assert tpr_threshold(ID10, 0.81) == 2.0
    assert tpr_threshold(list(range(100)), 0.95) == 5.0
    assert tpr_threshold([1.0, 1.0, 1.0], 0.5) == 1.0


def test_extremes():
    assert fpr_at_tpr([5, 6, 7], [0, 1, 2]).fpr == 0.0
    assert fpr_at_tpr([5, 6, 7], [0, 1, 2]).auroc == 1.0
    assert fpr_at_tpr([5, 6, 7], [8, 9]).fpr == 1.0


def test_null_case_fpr_near_target(rng):
    ids, oods = rng.standard_normal(20000), rng.standard_normal(20000)
    assert fpr_at_tpr(ids, oods).fpr == pytest.approx(0.95, abs=0.01)
    assert auroc(ids, oods) == pytest.approx(0.5, abs=0.01)


def test_auroc_ties_half():
    assert auroc([1.0, 1.0], [1.0, 1.0]) == 0.5
    assert auroc([2.0, 1.0], [1.0, 0.0]) == pytest.approx(0.875)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auroc_matches_mann_whitney(seed):
    r = np.random.default_rng(seed)
    a = np.round(r.standard_normal(r.integers(1, 40)), 1)
    b = np.round(r.standard_normal(r.integers(1, 40)) - 0.5, 1)
    u = stats.mannwhitneyu(a, b).statistic
    assert auroc(a, b) == pytest.approx(u / (a.size * b.size), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_transform_invariance(seed):
    r = np.random.default_rng(seed)
    ids = r.standard_normal(r.integers(1, 200))
    oods = r.standard_normal(r.integers(1, 200)) + r.uniform(-2, 2)
    base = fpr_at_tpr(ids, oods)
    for f in (lambda s: 3.0 * s + 7.0, np.exp, lambda s: s ** 3, np.arctan):
        out = fpr_at_tpr(f(ids), f(oods))
        assert out.fpr == base.fpr
        assert out.auroc == base.auroc


def test_score_validation():
    with pytest.raises(DataError):
        fpr_at_tpr([], [1.0])
    with pytest.raises(DataError):
        fpr_at_tpr([1.0, np.nan], [1.0])
    with pytest.raises(DataError):
        fpr_at_tpr([1.0], [1.0], tpr_target=1.5)


def test_spearman_with_tie_hand_value():
    assert spearman([1, 2, 2, 3, 4], [1, 3, 2, 4, 5]) == pytest.approx(9.5 / math.sqrt(95.0), abs=1e-12)


def test_correlations_agree_with_scipy(rng):
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    assert pearson(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y)[0], abs=1e-12)


def test_degenerate_correlations_are_nan():
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))
    assert math.isnan(spearman([1], [2]))


def test_correlate_table():
    metrics = [{"a": 1.0, "b": 3.0, "c": 1.0}, {"a": 2.0, "b": 1.0, "c": 1.0},
               {"a": 3.0, "b": 2.0, "c": 1.0}, {"a": 4.0, "b": 0.0, "c": 1.0}]
    fpr = [0.1, 0.2, 0.3, 0.4]
    table = correlate(metrics, {"MD": fpr, "RMD": fpr[::-1]})
    assert table.cell("a", "MD", "spearman") == pytest.approx(1.0)
    assert table.cell("a", "RMD", "spearman") == pytest.approx(-1.0)
    assert math.isnan(table.cell("c", "MD", "pearson"))
    assert [r["metric"] for r in table.to_rows()] == ["a", "b", "c"]
    self_table = correlate(metrics, [m["b"] for m in metrics])
    assert self_table.cell("b", self_table.detectors[0], "spearman") == pytest.approx(1.0)


def test_correlate_needs_three_models():
    with pytest.raises(DataError):
        correlate([{"a": 1.0}, {"a": 2.0}], [0.1, 0.2])


def test_combined_study_on_compactness_family():
    base = SynthConfig(seed=0, dim=16, n_classes=3, samples_per_class=200)
    fam = model_family(base, "within_spectrum_slope", np.linspace(-0.02, -0.4, 5))
    res = combined_metric_study(fam, "MMD", k=20)
    assert res.n == 5 and len(res.points) == 5
    assert res.spearman > 0.0
