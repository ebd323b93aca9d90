import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from geood.exceptions import ComputationError, DataError
from geood.gaussian import compute_scatter
from geood.geometry import (
    GEOMETRY_REPORT_SCHEMA,
    combined_lid_slope,
    fisher_ratio,
    geometry_reports,
    intrinsic_dimension,
    knn_distances,
    lid_estimates,
    lid_from_distances,
    regression_features,
    spectral_ratio_curves,
    spectral_shift,
    spectrum_metrics,
)
from geood.synth import SynthConfig, generate

from conftest import labeled, unlabeled


def test_hand_spectrum():
    r = spectrum_metrics([4.0, 2.0, 2.0])
    assert r.total_variance == 8.0
    assert r.effective_rank == 2.0
    assert r.participation_ratio == pytest.approx(64 / 24, abs=1e-12)
    assert r.condition_number == 2.0
    assert r.dim_90_var == 3
    assert r.spectral_gap is None and "spectral_gap_undefined_d_lt_6" in r.flags


def test_entropy_and_gap():
    lam = np.ones(8)
    r = spectrum_metrics(lam)
    assert r.entropy == pytest.approx(math.log(8))
    assert r.spectral_gap == 0.0
    assert r.slope == pytest.approx(0.0, abs=1e-12)


def test_exponential_and_power_law_spectra():
    i = np.arange(1, 31)
    assert spectrum_metrics(np.exp(-i)).slope == pytest.approx(-1.0, abs=1e-9)
    assert spectrum_metrics(np.exp(-i)).avg_log_decay_top20 == pytest.approx(1.0, abs=1e-9)
    assert spectrum_metrics(i ** -2.0).beta_power_law == pytest.approx(2.0, abs=1e-9)


def test_spectrum_input_validation():
    with pytest.raises(DataError):
        spectrum_metrics([1.0, 2.0])
    with pytest.raises(DataError):
        spectrum_metrics([0.0, 0.0])
    with pytest.raises(DataError):
        spectrum_metrics([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=40))
def test_spectrum_metric_bounds(vals):
    lam = np.sort(vals)[::-1]
    r = spectrum_metrics(lam)
    d = lam.size
    assert 1 - 1e-9 <= r.effective_rank <= d + 1e-9
    assert 1 - 1e-9 <= r.participation_ratio <= d + 1e-9
    assert 0 <= r.entropy <= math.log(d) + 1e-9
    assert 1 <= r.dim_90_var <= d
    assert r.condition_number >= 1.0
    c = 7.3
    scaled = spectrum_metrics(lam * c)
    assert scaled.slope == pytest.approx(r.slope, abs=1e-9)
    assert scaled.effective_rank == pytest.approx(r.effective_rank, rel=1e-9)


def test_lid_hand_example():
    assert lid_from_distances(np.array([[1.0, math.e]]))[0] == pytest.approx(2.0)


def test_lid_degenerate_points_skipped():
    out = lid_from_distances(np.array([[0.0, 1.0], [1.0, 1.0], [1.0, math.e]]))
    assert np.isnan(out[0]) and np.isnan(out[1]) and out[2] == pytest.approx(2.0)
    with pytest.raises(ComputationError):
        lid_estimates(unlabeled(np.zeros((5, 2))), [2])


def test_knn_matches_brute_force(rng):
    X = rng.standard_normal((60, 4))
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    ref = np.sort(D, axis=1)[:, :7]
    np.testing.assert_allclose(knn_distances(X, 7), ref, rtol=1e-10)
    with pytest.raises(DataError):
        knn_distances(X[:5], 5)


def test_knn_with_duplicates():
    X = np.array([[0.0], [0.0], [1.0], [3.0]])
    d = knn_distances(X, 2)
    np.testing.assert_allclose(d[:2], [[0.0, 1.0], [0.0, 1.0]])


def test_lid_on_plane_and_line(rng):
    basis = np.linalg.qr(rng.standard_normal((10, 2)))[0]
    plane = rng.uniform(-1, 1, (1000, 2)) @ basis.T
    line = np.outer(rng.uniform(-1, 1, 1000), basis[:, 0])
    assert 1.7 <= lid_estimates(unlabeled(plane), [25])[25] <= 2.3
    assert 0.8 <= lid_estimates(unlabeled(line), [25])[25] <= 1.2
    assert 0.8 <= intrinsic_dimension(unlabeled(line)) <= 1.2


def test_lid_grows_with_dimension():
    lids = [lid_estimates(generate(SynthConfig(seed=0, dim=d, n_classes=3, samples_per_class=300))[0], [25])[25]
            for d in (8, 16, 32)]
    assert lids[0] < lids[1] < lids[2]


def test_spectral_shift_examples():
    assert spectral_shift([2.0], [3.0]).shifts.tolist() == [0.5]
    lam = np.array([5.0, 3.0, 1.0])
    np.testing.assert_allclose(spectral_shift(lam, 0.8 * lam).shifts, -0.2, atol=1e-15)
    sh = spectral_shift([1.0, 0.0], [1.0, 0.5], eval_role="ood")
    assert sh.n_dropped == 1 and sh.eval_role == "ood"
    assert spectral_shift(np.ones(600), np.ones(600)).shifts.size == 512
    with pytest.raises(DataError):
        spectral_shift([1.0], [1.0, 2.0])


def test_fisher_ratio_tight_clusters():
    X = [[-2, 0.1], [-2, -0.1], [2, 0.1], [2, -0.1]]
    sc = compute_scatter(labeled(X, [0, 0, 1, 1]))
    assert fisher_ratio(sc) == pytest.approx(4.0 / 0.01)
    with pytest.raises(DataError):
        fisher_ratio(compute_scatter(unlabeled(X)))


def test_combined_metric_on_plane(rng):
    # within-class spectrum exp(-1), exp(-2) on a 2-D plane in 6-D
    basis = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    Z = rng.standard_normal((2000, 2)) * np.sqrt([math.exp(-1), math.exp(-2)])
    es = labeled(Z @ basis.T, np.zeros(2000, dtype=int))
    val = combined_lid_slope(es, compute_scatter(es))
    assert val == pytest.approx(-2.0, abs=0.4)
    scaled = es.with_features(es.features * 5.0)
    assert combined_lid_slope(scaled, compute_scatter(scaled)) == pytest.approx(val, rel=1e-9)


def test_reports_validate_against_schema(small_exp):
    reports = geometry_reports(small_exp.train, k_values=[10, 25])
    assert set(reports) == {"C", "S_w", "S_b"}
    for rep in reports.values():
        jsonschema.validate(rep.to_dict(), GEOMETRY_REPORT_SCHEMA)
        assert rep.fisher_ratio == rep.fisher_ratio_traces
    feats = regression_features(reports)
    assert {"C.slope", "S_w.slope", "lid_10", "lid_25", "intrinsic_dim", "lid_x_slope"} <= set(feats)
    assert all(math.isfinite(v) for v in feats.values())


def test_reports_for_unlabeled_set(small_exp):
    reports = geometry_reports(small_exp.ood["isotropic_far"], k_values=[10])
    assert set(reports) == {"C"}
    assert reports["C"].fisher_ratio is None


def test_ratio_curves(small_exp):
    sc = compute_scatter(small_exp.train)
    curves = spectral_ratio_curves(sc, sc)
    np.testing.assert_allclose(curves["C_eval/C_train"], 1.0)
    assert np.all(curves["S_b/S_w"] >= 0)
