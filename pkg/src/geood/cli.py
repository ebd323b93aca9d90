"""Command line interface: ``geood <command> [flags]``.

Exit codes: 0 success, 1 computation error, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from geood import __version__
from geood.beta_optimizer import LodoRow, lodo_evaluate, parse_grid, sweep_beta_many
from geood.detectors import dimension_ablation, per_dimension_separation, score
from geood.embeddings_io import Role, load_embeddings, load_manifest
from geood.evaluation import correlate, fpr_at_tpr, spearman
from geood.exceptions import DataError, GeoodError
from geood.gaussian import compute_scatter, fit_gaussian, load_model, save_model
from geood.geometry import (
    EIG_FLOOR,
    LID_K_VALUES,
    SHIFT_MAX_LEN,
    combined_lid_slope,
    geometry_reports,
    regression_features,
    scatter_spectra,
    spectral_ratio_curves,
    spectral_shift,
)
from geood.radial import RadialConfig, fit_beta_pipeline, score_beta_pipeline
from geood.synth import SynthConfig, generate_experiment, model_family, write_experiment
from geood.validation import DETECTORS

logger = logging.getLogger("geood")

THREADS_ENV = "GEOOD_THREADS"
DEFAULT_GRID = "-2:3:0.25"


# -- output helpers -------------------------------------------------------------

def _clean(obj):
    """Make ``obj`` strict-JSON serializable (NaN/inf -> null, numpy -> python)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else None
    return obj


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


# -- argument parsing -----------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--manifest", type=Path, help="experiment manifest (JSON)")
    g.add_argument("--out", type=Path, default=Path("."), help="output directory")
    g.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    g.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    g.add_argument("--eps-scale", type=float, default=1e-6, help="covariance ridge, relative to mean diagonal")
    g.add_argument("--beta", type=float, default=None, help="radial normalization exponent")
    g.add_argument("--beta-grid", default=DEFAULT_GRID,
                   help="sweep grid lo:hi:step or comma list (use --beta-grid=-1:2:0.5 for a negative start)")
    g.add_argument("--detectors", default="MD,RMD,MMD", help="comma list from MD,RMD,MMD")
    g.add_argument("--lid-k", default=",".join(map(str, LID_K_VALUES)), help="comma list of LID neighbourhood sizes")
    g.add_argument("--whitening", choices=("global", "tied"), default="global")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="geood", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geood {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fit", parents=[common], help="fit and save a Gaussian model")
    p = sub.add_parser("score", parents=[common], help="score an embedding file with a saved model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--role", choices=[r.value for r in Role], default="ood")
    sub.add_parser("evaluate", parents=[common], help="FPR@95 / AUROC per detector and OOD dataset")
    sub.add_parser("sweep", parents=[common], help="beta grid sweep")
    p = sub.add_parser("geometry", parents=[common], help="geometry reports, spectral shifts, separation, ablation")
    p.add_argument("--no-ablation", action="store_true", help="skip the per-dimension ablation curves")
    p = sub.add_parser("correlate", parents=[common], help="correlate geometry metrics with FPR across models")
    p.add_argument("report_dir", type=Path)
    p.add_argument("--svg", action="store_true", help="also render a heatmap SVG (needs matplotlib)")
    p = sub.add_parser("lodo", parents=[common], help="leave-one-dataset-out beta regression")
    p.add_argument("experiment_dir", type=Path)
    p.add_argument("--ridge-lambda", type=float, default=1e-2)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset (or model family)")
    p.add_argument("--config", type=Path, help="JSON synth config")
    return parser


def _detectors(args, parser) -> list[str]:
    dets = [d.strip().upper() for d in args.detectors.split(",") if d.strip()]
    bad = [d for d in dets if d not in DETECTORS]
    if bad or not dets:
        parser.error(f"unknown detector(s) {bad or args.detectors!r}; choose from {','.join(DETECTORS)}")
    return dets


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _lid_ks(args) -> list[int]:
    try:
        return [int(k) for k in args.lid_k.split(",") if k.strip()]
    except ValueError as exc:
        raise DataError(f"cannot parse --lid-k {args.lid_k!r}") from exc


def _need_manifest(args, parser):
    if args.manifest is None:
        parser.error(f"{args.command} needs --manifest")
    return load_manifest(args.manifest)


def _radial_cfg(args, beta: float | None = None) -> RadialConfig:
    b = args.beta if beta is None else beta
    return RadialConfig(beta=1.0 if b is None else b, whitening_source=args.whitening, eps_scale=args.eps_scale)


# -- commands -------------------------------------------------------------------

def cmd_fit(args, parser) -> int:
    man = _need_manifest(args, parser)
    train = man.load_train()
    if args.beta is None:
        model = fit_gaussian(train, args.eps_scale)
    else:
        model = fit_beta_pipeline(train, args.beta, _radial_cfg(args))
    path = save_model(model, args.out / "model.json")
    logger.info("wrote %s", path)
    return 0


def _score_rows(sv):
    arg = sv.argmin_class if sv.argmin_class is not None else np.full(len(sv), -1)
    return ((i, s, int(a)) for i, (s, a) in enumerate(zip(sv.scores, arg)))


def cmd_score(args, parser) -> int:
    dets = args.detector_list
    model = load_model(args.model)
    data = load_embeddings(args.input, args.role, expected_dim=model.dim if model.transform is None else model.transform.W.shape[1])
    for det in dets:
        if model.transform is None:
            sv = score(model, data, det)
        else:
            sv = score_beta_pipeline(model, data, args.beta, None, det)
        write_csv(args.out / f"scores_{det}.csv", ["sample_index", "score", "argmin_class"], _score_rows(sv))
    return 0


def _evaluate_rows(man, dets, args) -> list[tuple]:
    train, id_eval, oods = man.load_train(), man.load_id_eval(), man.load_ood()
    if args.beta is None:
        model = fit_gaussian(train, args.eps_scale)
        scorer = lambda data, det: score(model, data, det).scores  # noqa: E731
    else:
        cfg = _radial_cfg(args)
        model = fit_beta_pipeline(train, args.beta, cfg)
        scorer = lambda data, det: score_beta_pipeline(model, data, args.beta, cfg, det).scores  # noqa: E731
    rows = []
    for det in dets:
        ids = scorer(id_eval, det)
        fprs, aurocs = [], []
        for name, ood in oods.items():
            res = fpr_at_tpr(ids, scorer(ood, det))
            rows.append((man.model_name, det, name, res.fpr, res.auroc))
            fprs.append(res.fpr)
            aurocs.append(res.auroc)
        rows.append((man.model_name, det, "Average", float(np.mean(fprs)), float(np.mean(aurocs))))
    return rows


def cmd_evaluate(args, parser) -> int:
    man = _need_manifest(args, parser)
    rows = _evaluate_rows(man, args.detector_list, args)
    write_csv(args.out / "results.csv", ["model", "detector", "dataset", "fpr", "auroc"], rows)
    return 0


def cmd_sweep(args, parser) -> int:
    man = _need_manifest(args, parser)
    dets = args.detector_list
    grid = parse_grid(args.beta_grid)
    res = sweep_beta_many(man.load_train(), man.load_id_eval(), man.load_ood(), dets, grid,
                          _radial_cfg(args), _threads(args))
    summary = []
    for (det, name), r in res.items():
        write_csv(args.out / f"sweep_{det}_{name}.csv", ["beta", "fpr"], zip(r.grid, r.fpr_per_beta))
        summary.append({"detector": det, "dataset": name, "beta_star": r.beta_star, "fpr_star": r.fpr_star,
                        "fpr_0": r.fpr_at(0.0), "fpr_1": r.fpr_at(1.0)})
    write_json(args.out / "sweep_summary.json", {"model_name": man.model_name, "grid": grid, "cells": summary})
    return 0


def cmd_geometry(args, parser) -> int:
    man = _need_manifest(args, parser)
    dets = args.detector_list
    train, id_eval, oods = man.load_train(), man.load_id_eval(), man.load_ood()
    reports = geometry_reports(train, k_values=_lid_ks(args))
    train_scatter = compute_scatter(train)
    for src, rep in reports.items():
        write_json(args.out / f"geometry_{src}.json", {"model_name": man.model_name, "dataset": "train", **rep.to_dict()})
    k_comb = 25 if 25 < train.n_samples else min(_lid_ks(args))
    write_json(args.out / "geometry.json", {
        "model_name": man.model_name,
        "reports": {src: rep.to_dict() for src, rep in reports.items()},
        "features": regression_features(reports),
        "lid_x_slope": combined_lid_slope(train, train_scatter, k_comb),
        "lid_x_slope_k": k_comb,
    })

    train_spec = scatter_spectra(train_scatter)
    evals = [("validation", "id_eval", compute_scatter(id_eval))]
    evals += [("ood", name, compute_scatter(ood)) for name, ood in oods.items()]
    for role, label, sc in evals:
        for src, lam_eval in scatter_spectra(sc).items():
            tr = train_spec[src]
            sh = spectral_shift(tr, lam_eval, matrix_source=src, eval_role=role)
            n = min(tr.size, SHIFT_MAX_LEN)
            keep = np.flatnonzero(tr[:n] > EIG_FLOOR * max(tr[0], 0.0)) if tr[0] > 0 else np.arange(n)
            rows = ((int(i) + 1, tr[i], lam_eval[i], s) for i, s in zip(keep, sh.shifts))
            write_csv(args.out / f"shift_{src}_{label}.csv", ["index", "lambda_train", "lambda_eval", "shift"], rows)
    ratios = spectral_ratio_curves(train_scatter, evals[0][2])
    for key, curve in ratios.items():
        fname = "ratio_" + key.replace("/", "_over_") + ".csv"
        write_csv(args.out / fname, ["index", "ratio"], ((i + 1, v) for i, v in enumerate(curve)))

    model = fit_gaussian(train, args.eps_scale)
    for det in dets:
        for name, ood in oods.items():
            prof = per_dimension_separation(model, id_eval, ood, det)
            write_csv(args.out / f"separation_{det}_{name}.csv", ["index", "eigenvalue", "separation"],
                      ((i + 1, lam, s) for i, (lam, s) in enumerate(zip(prof.eigenvalues, prof.separation))))
            if args.no_ablation:
                continue
            for direction in ("forward", "backward"):
                curve = dimension_ablation(model, id_eval, ood, det, direction)
                write_csv(args.out / f"ablation_{det}_{name}_{direction}.csv", ["K", "fpr"],
                          zip(curve.ks, curve.fpr_at_k))
    return 0


def _read_results(path: Path) -> dict[str, float]:
    """Average FPR per detector from a results CSV."""
    per_det: dict[str, list[float]] = {}
    avg: dict[str, float] = {}
    with path.open() as fh:
        for row in csv.DictReader(fh):
            if row["dataset"] == "Average":
                avg[row["detector"]] = float(row["fpr"])
            else:
                per_det.setdefault(row["detector"], []).append(float(row["fpr"]))
    for det, vals in per_det.items():
        avg.setdefault(det, float(np.mean(vals)))
    return avg


def cmd_correlate(args, parser) -> int:
    root = args.report_dir
    if not root.is_dir():
        raise FileNotFoundError(f"report directory not found: {root}")
    models = []
    for geo in sorted(root.rglob("geometry.json")):
        res = geo.parent / "results.csv"
        if not res.is_file():
            logger.warning("skipping %s: no results.csv next to it", geo.parent)
            continue
        doc = json.loads(geo.read_text())
        feats = dict(doc["features"])
        if doc.get("lid_x_slope") is not None:
            feats["abs_lid_x_slope"] = abs(doc["lid_x_slope"])
        models.append((doc["model_name"], feats, _read_results(res)))
    if len(models) < 3:
        raise DataError(f"correlation needs >= 3 models with geometry.json + results.csv, found {len(models)}")
    dets = [d for d in DETECTORS if all(d in m[2] for m in models)]
    if not dets:
        raise DataError("no detector is present in every results.csv")
    perf = {d: [m[2][d] for m in models] for d in dets}
    table = correlate([m[1] for m in models], perf)
    for method in ("spearman", "pearson"):
        mat = getattr(table, method)
        write_csv(args.out / f"correlation_{method}.csv", ["metric", *table.detectors, "n"],
                  ((name, *mat[i], int(table.n[i].min())) for i, name in enumerate(table.metrics)))
    names = list(table.metrics)
    cols = {n: [m[1].get(n, float("nan")) for m in models] for n in names}
    mm_rows = []
    for a in names:
        row = [a]
        for b in names:
            x, y = np.asarray(cols[a], float), np.asarray(cols[b], float)
            ok = np.isfinite(x) & np.isfinite(y)
            row.append(spearman(x[ok], y[ok]) if ok.sum() >= 3 else float("nan"))
        mm_rows.append(row)
    write_csv(args.out / "metric_correlation_spearman.csv", ["metric", *names], mm_rows)
    write_csv(args.out / "lid_slope_scatter.csv", ["model", "abs_lid_x_slope", *dets],
              ((m[0], m[1].get("abs_lid_x_slope"), *(m[2][d] for d in dets)) for m in models))
    if args.svg:
        _heatmap_svg(args.out / "correlation_spearman.svg", table)
    return 0


def _heatmap_svg(path: Path, table) -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "geood"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(table.detectors), 0.3 * len(table.metrics) + 1.5))
    im = ax.imshow(np.nan_to_num(table.spearman), cmap="RdBu_r", vmin=-1, vmax=1, aspect="auto")
    ax.set_xticks(range(len(table.detectors)), table.detectors)
    ax.set_yticks(range(len(table.metrics)), table.metrics, fontsize=7)
    fig.colorbar(im, ax=ax, label="Spearman")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _lodo_model(manifest_path: Path, dets, grid, args):
    man = load_manifest(manifest_path)
    train = man.load_train()
    usable = [k for k in _lid_ks(args) if k < train.n_samples]
    feats = regression_features(geometry_reports(train, k_values=usable))
    sweeps = sweep_beta_many(train, man.load_id_eval(), man.load_ood(), dets, grid, _radial_cfg(args), _threads(args))
    return man.model_name, feats, sweeps


def cmd_lodo(args, parser) -> int:
    root = args.experiment_dir
    if not root.is_dir():
        raise FileNotFoundError(f"experiment directory not found: {root}")
    manifests = sorted(root.rglob("manifest.json"))
    if not manifests:
        raise DataError(f"no manifest.json under {root}")
    dets = args.detector_list
    grid = parse_grid(args.beta_grid)
    models = [_lodo_model(p, dets, grid, args) for p in manifests]
    for det in dets:
        rows = [LodoRow.from_sweep(name, feats, sw) for name, feats, sweeps in models
                for (d, _), sw in sweeps.items() if d == det]
        report = lodo_evaluate(rows, det, ridge_lambda=args.ridge_lambda, grid=grid)
        write_json(args.out / f"lodo_{det}.json", report.to_dict())
    return 0


def cmd_synth(args, parser) -> int:
    doc = {}
    if args.config is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config not found: {args.config}")
        try:
            doc = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc})") from exc
    doc = dict(doc)
    kinds = doc.pop("ood_kinds", None)
    family = doc.pop("family", None)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(doc)
    if family:
        exps = model_family(cfg, family["vary"], family["values"], kinds)
        for exp in exps:
            write_experiment(exp, args.out / exp.name)
    else:
        write_experiment(generate_experiment(cfg, kinds, name=doc.get("name")), args.out)
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "geometry": cmd_geometry,
    "correlate": cmd_correlate,
    "lodo": cmd_lodo,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.detector_list = _detectors(args, parser)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, parser)
    except (FileNotFoundError, DataError, PermissionError) as exc:
        print(f"geood {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except GeoodError as exc:
        print(f"geood {args.command}: computation error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
