import csv
import json

import jsonschema
import numpy as np
import pytest

from geood.cli import main
from geood.detectors import score
from geood.embeddings_io import load_embeddings, load_manifest
from geood.gaussian import fit_gaussian, load_model
from geood.geometry import GEOMETRY_REPORT_SCHEMA

CONFIG = {
    "dim": 6, "n_classes": 3, "samples_per_class": 60,
    "ood_kinds": ["subspace_shift", "isotropic_far@6"],
    "family": {"vary": "within_spectrum_slope", "values": [-0.05, -0.2, -0.4]},
}


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def family(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    assert run("synth", "--config", cfg, "--out", root / "fam", "--seed", 3) == 0
    members = sorted(p for p in (root / "fam").iterdir())
    for d in members:
        assert run("evaluate", "--manifest", d / "manifest.json", "--out", d) == 0
        assert run("geometry", "--manifest", d / "manifest.json", "--out", d, "--lid-k", "10,25", "--no-ablation") == 0
    return root, members


def test_synth_layout(family):
    _, members = family
    assert [m.name for m in members] == ["within_spectrum_slope_00", "within_spectrum_slope_01", "within_spectrum_slope_02"]
    man = load_manifest(members[0] / "manifest.json")
    assert man.metadata["synth_config"]["seed"] == 3
    assert set(man.load_ood()) == {"subspace_shift", "isotropic_far@6"}


def test_synth_without_config(tmp_path):
    assert run("synth", "--out", tmp_path, "--seed", 1) == 0
    assert load_manifest(tmp_path / "manifest.json").load_train().dim == 32


def test_fit_and_score_match_library(family, tmp_path):
    _, members = family
    man = load_manifest(members[0] / "manifest.json")
    assert run("fit", "--manifest", members[0] / "manifest.json", "--out", tmp_path) == 0
    model = load_model(tmp_path / "model.json")
    ood_path = members[0] / "ood_subspace_shift.csv"
    assert run("score", "--model", tmp_path / "model.json", "--input", ood_path, "--out", tmp_path,
               "--detectors", "MD,RMD") == 0
    ref = score(fit_gaussian(man.load_train()), load_embeddings(ood_path, "ood"), "RMD")
    rows = read_csv(tmp_path / "scores_RMD.csv")
    np.testing.assert_array_equal([float(r["score"]) for r in rows], ref.scores)
    assert [int(r["argmin_class"]) for r in rows] == ref.argmin_class.tolist()
    assert model.transform is None


def test_fit_with_beta_records_transform(family, tmp_path):
    _, members = family
    assert run("fit", "--manifest", members[0] / "manifest.json", "--out", tmp_path, "--beta", 0.5) == 0
    model = load_model(tmp_path / "model.json")
    assert model.transform.beta == 0.5
    assert run("score", "--model", tmp_path / "model.json", "--input", members[0] / "id_eval.csv",
               "--role", "id_eval", "--out", tmp_path, "--beta", 0.5) == 0
    assert run("score", "--model", tmp_path / "model.json", "--input", members[0] / "id_eval.csv",
               "--role", "id_eval", "--out", tmp_path, "--beta", 1.0) == 1


def test_evaluate_schema(family):
    _, members = family
    rows = read_csv(members[0] / "results.csv")
    assert list(rows[0]) == ["model", "detector", "dataset", "fpr", "auroc"]
    assert {r["detector"] for r in rows} == {"MD", "RMD", "MMD"}
    for det in ("MD", "RMD", "MMD"):
        per = [float(r["fpr"]) for r in rows if r["detector"] == det and r["dataset"] != "Average"]
        avg = [float(r["fpr"]) for r in rows if r["detector"] == det and r["dataset"] == "Average"]
        assert avg == [pytest.approx(np.mean(per))]
    far = [float(r["fpr"]) for r in rows if r["dataset"] == "isotropic_far@6" and r["detector"] == "MD"]
    assert max(far) < 0.05


def test_geometry_outputs(family):
    _, members = family
    d = members[1]
    for src in ("C", "S_w", "S_b"):
        doc = json.loads((d / f"geometry_{src}.json").read_text())
        jsonschema.validate(doc, GEOMETRY_REPORT_SCHEMA)
        assert doc["matrix_source"] == src
    summary = json.loads((d / "geometry.json").read_text())
    assert "S_w.slope" in summary["features"] and summary["lid_x_slope"] < 0
    shift = read_csv(d / "shift_C_id_eval.csv")
    assert list(shift[0]) == ["index", "lambda_train", "lambda_eval", "shift"]
    sep = read_csv(d / "separation_MD_subspace_shift.csv")
    assert len(sep) == 6
    assert not list(d.glob("ablation_*"))


def test_geometry_ablation_files(family, tmp_path):
    _, members = family
    assert run("geometry", "--manifest", members[0] / "manifest.json", "--out", tmp_path,
               "--detectors", "MD", "--lid-k", "10") == 0
    rows = read_csv(tmp_path / "ablation_MD_subspace_shift_backward.csv")
    assert [int(r["K"]) for r in rows] == list(range(1, 7))


def test_sweep_outputs(family, tmp_path):
    _, members = family
    assert run("sweep", "--manifest", members[0] / "manifest.json", "--out", tmp_path,
               "--detectors", "MD", "--beta-grid=-1:2:0.5") == 0
    rows = read_csv(tmp_path / "sweep_MD_subspace_shift.csv")
    assert [float(r["beta"]) for r in rows] == [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    for cell in summary["cells"]:
        assert cell["fpr_star"] <= min(cell["fpr_0"], cell["fpr_1"])


def test_correlate(family, tmp_path):
    root, _ = family
    assert run("correlate", root / "fam", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "correlation_spearman.csv")
    assert list(rows[0]) == ["metric", "MD", "RMD", "MMD", "n"]
    mm = read_csv(tmp_path / "metric_correlation_spearman.csv")
    for r in mm:
        if r[r["metric"]]:
            assert float(r[r["metric"]]) == pytest.approx(1.0)
    assert (tmp_path / "lid_slope_scatter.csv").exists()


def test_correlate_refuses_two_models(family, tmp_path):
    root, members = family
    sub = tmp_path / "two"
    for m in members[:2]:
        (sub / m.name).mkdir(parents=True)
        for f in ("geometry.json", "results.csv"):
            (sub / m.name / f).write_text((m / f).read_text())
    assert run("correlate", sub, "--out", tmp_path) == 2


def test_lodo(family, tmp_path):
    root, _ = family
    assert run("lodo", root / "fam", "--out", tmp_path, "--detectors", "MD", "--lid-k", "10,25",
               "--beta-grid=-1:2:0.5") == 0
    doc = json.loads((tmp_path / "lodo_MD.json").read_text())
    assert {"mae", "r2", "cells"} <= set(doc)
    assert len(doc["cells"]) == 6


def test_exit_codes(tmp_path, capsys):
    assert run("evaluate", "--manifest", tmp_path / "missing.json", "--out", tmp_path) == 2
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--manifest", tmp_path / "m.json", "--detectors", "KNN")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("evaluate")
    assert exc.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_threads_env(family, tmp_path, monkeypatch):
    _, members = family
    monkeypatch.setenv("GEOOD_THREADS", "3")
    assert run("sweep", "--manifest", members[0] / "manifest.json", "--out", tmp_path / "env",
               "--detectors", "MD", "--beta-grid", "0,1") == 0
    assert run("sweep", "--manifest", members[0] / "manifest.json", "--out", tmp_path / "one",
               "--detectors", "MD", "--beta-grid", "0,1", "--threads", 1) == 0
    assert (tmp_path / "env" / "sweep_summary.json").read_bytes() == (tmp_path / "one" / "sweep_summary.json").read_bytes()
