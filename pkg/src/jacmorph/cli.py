"""Command-line interface: file-level operations plus the run/sweep drivers.

Subcommands operate on MetaImage volumes and RFC-4180 CSV tables so every
pipeline stage is scriptable in isolation: ``phantom`` writes synthetic
cohorts, ``blend``/``register``/``jacobian``/``features`` are the per-case
stages, ``univariate``/``predict``/``evaluate`` the cohort analyses, and
``run``/``sweep`` drive the whole study from a JSON config.  Exit status is 0
on success and 2 with a stage-tagged message on stderr otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, DivergedError, GeometryError, InputError,
                     NotConvergedError, StageError)
from .grid import BlendConfig, Image3D, blend_raw
from .jacobian import (JacobianMap, evaluate_cohort, jacobian_integral_change,
                       jacobian_map)
from .mha import read_image, read_mask, read_mha, write_image, write_mask, write_mha
from .phantom import cohort_specs, make_sphere_phantom
from .pipeline import (PipelineConfig, load_config, param_sweep, run_pipeline,
                       write_csv, write_json)
from .predict import cross_validate
from .registration import DeformationField, register_pair
from .stats import CaseTable, univariate
from .texture import FEATURE_NAMES, extract_all


# --------------------------------------------------------------------------- #
# Table IO
# --------------------------------------------------------------------------- #
def _read_rows(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path} is empty")
    return rows


def _read_feature_table(path) -> tuple[list[str], list[str], np.ndarray]:
    """Parse a features CSV (header: case_id, then feature names)."""
    rows = _read_rows(path)
    header = rows[0]
    if not header or header[0] != "case_id":
        raise InputError(f"{path}: first column must be case_id, got {header[:1]}")
    names = header[1:]
    if not names:
        raise InputError(f"{path} has no feature columns")
    case_ids, values = [], []
    for row in rows[1:]:
        if len(row) != len(header):
            raise InputError(f"{path}: row for {row[:1]} has {len(row)} cells, "
                             f"expected {len(header)}")
        case_ids.append(row[0])
        values.append([float(v) for v in row[1:]])
    return case_ids, names, np.asarray(values, dtype=np.float64)


def _read_labels(path) -> dict[str, bool]:
    rows = _read_rows(path)
    if rows[0] != ["case_id", "label"]:
        raise InputError(f"{path}: expected header case_id,label, got {rows[0]}")
    labels = {}
    for row in rows[1:]:
        if len(row) != 2 or row[1] not in ("0", "1"):
            raise InputError(f"{path}: labels must be 0 or 1, got {row}")
        labels[row[0]] = row[1] == "1"
    return labels


def _load_case_table(features_path, labels_path) -> CaseTable:
    case_ids, names, X = _read_feature_table(features_path)
    label_map = _read_labels(labels_path)
    missing = [c for c in case_ids if c not in label_map]
    if missing:
        raise InputError(f"no label for case(s) {missing[:5]}")
    y = np.asarray([label_map[c] for c in case_ids], dtype=bool)
    return CaseTable(features=X, labels=y, names=tuple(names),
                     case_ids=tuple(case_ids))


def _pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


# --------------------------------------------------------------------------- #
# Subcommand handlers
# --------------------------------------------------------------------------- #
def _cmd_phantom(args) -> None:
    out = Path(args.out)
    specs = cohort_specs(args.n, tuple(args.change_range), args.seed)
    if args.dims:
        specs = [replace(s, dims=tuple(args.dims)) for s in specs]
    for i, spec in enumerate(specs):
        case = make_sphere_phantom(spec)
        case_dir = out / f"case{i:03d}"
        case_dir.mkdir(parents=True, exist_ok=True)
        write_image(case_dir / "baseline.mha", case.baseline_img)
        write_image(case_dir / "followup.mha", case.followup_img)
        write_mask(case_dir / "baseline_mask.mha", case.baseline_mask)
        write_mask(case_dir / "followup_mask.mha", case.followup_mask)
        write_json(case_dir / "case.json", {
            "true_change_pct": case.true_change_pct,
            "spec": asdict(spec),
        })
    print(f"wrote {len(specs)} cases to {out}")


def _cmd_blend(args) -> None:
    cfg = BlendConfig(alpha=args.alpha, ct_clip_max=args.ct_clip,
                      ct_norm_range=tuple(args.ct_range),
                      pet_norm_range=tuple(args.pet_range))
    blended = blend_raw(read_image(args.ct), read_image(args.pet), cfg)
    write_image(args.out, blended)
    print(f"wrote {args.out}")


def _cmd_register(args) -> None:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    reg_cfg = cfg.registration.for_channel(args.channel)
    fixed_mask = read_mask(args.fixed_mask) if args.fixed_mask else None
    moving_mask = read_mask(args.moving_mask) if args.moving_mask else None
    result = register_pair(read_image(args.fixed), read_image(args.moving),
                           reg_cfg, args.engine,
                           fixed_mask=fixed_mask, moving_mask=moving_mask,
                           rigidity_prepass=args.rigidity_prepass)
    fld = result.forward_field
    write_mha(args.out_field, fld.vectors, fld.spacing, fld.origin, "MET_FLOAT")
    if args.out_inverse:
        inv = result.inverse_field
        write_mha(args.out_inverse, inv.vectors, inv.spacing, inv.origin, "MET_FLOAT")
    if args.trace:
        write_csv(args.trace, ["iteration", "similarity", "geodesic", "regularizer"],
                  [[i, repr(s), repr(g), repr(r)]
                   for i, (s, g, r) in enumerate(result.cost_trace)])
    print(f"wrote {args.out_field} (converged={result.converged}, "
          f"{len(result.cost_trace)} iterations)")


def _read_field(path) -> DeformationField:
    arr, spacing, origin = read_mha(path)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise InputError(f"{path} is not a 3-component vector field "
                         f"(shape {arr.shape})")
    return DeformationField(arr, spacing, origin)


def _cmd_jacobian(args) -> None:
    jmap = jacobian_map(_read_field(args.field))
    write_image(args.out_jmap, jmap.image)
    report = {
        "min_jacobian": jmap.min(),
        "max_jacobian": float(jmap.data.max()),
        "mean_jacobian": float(jmap.data.mean()),
    }
    if args.mask:
        report["est_change_pct"] = jacobian_integral_change(jmap, read_mask(args.mask))
    write_json(args.report, report)
    print(f"wrote {args.out_jmap} and {args.report}")


def _cmd_features(args) -> None:
    arr, spacing, origin = read_mha(args.jmap)
    if arr.ndim != 3:
        raise InputError(f"{args.jmap} is not a scalar volume")
    jmap = JacobianMap(Image3D(arr, spacing, origin))
    fv = extract_all(jmap, read_mask(args.mask), args.n_bins)
    case_id = args.case_id or Path(args.jmap).stem
    write_csv(args.out, ["case_id"] + list(FEATURE_NAMES),
              [[case_id] + [repr(v) for v in fv.values]])
    print(f"wrote {args.out}" + (" (degenerate ROI)" if fv.degenerate else ""))


def _cmd_univariate(args) -> None:
    table = _load_case_table(args.features, args.labels)
    results = univariate(table)
    write_csv(args.out, ["name", "auc", "p_value"],
              [[r.name, repr(r.auc), repr(r.p_value)] for r in results])
    print(f"wrote {args.out} ({len(results)} features)")


def _cmd_predict(args) -> None:
    table = _load_case_table(args.features, args.labels)
    report = cross_validate(table, folds=args.folds, repeats=args.repeats,
                            seed=args.seed)
    write_json(args.out_report, {
        "folds": report.folds,
        "seed": report.seed,
        "mean": report.mean,
        "sd": report.sd,
        "per_repeat": list(report.per_repeat),
        "selection_counts": [[name, count]
                             for name, count in report.selection_counts.items()],
        "accuracy_curve": list(report.accuracy_curve),
    })
    write_csv(args.curve, ["feature_count", "accuracy"],
              [[m + 1, repr(acc)] for m, acc in enumerate(report.accuracy_curve)])
    print(f"wrote {args.out_report} (accuracy {report.mean['accuracy']:.3f} "
          f"+/- {report.sd['accuracy']:.3f})")


def _cmd_evaluate(args) -> None:
    rows = _read_rows(args.cases)
    expected = ["case_id", "est_change_pct", "gt_change_pct", "dsc"]
    if rows[0] != expected:
        raise InputError(f"{args.cases}: expected header {','.join(expected)}, "
                         f"got {rows[0]}")
    case_ids = [r[0] for r in rows[1:]]
    triples = [(float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
    report = evaluate_cohort(triples)
    write_json(args.out_json, {
        "cases": [{"case_id": cid, "est_change_pct": est, "gt_change_pct": gt,
                   "dsc": d}
                  for cid, (est, gt, d) in zip(case_ids, triples)],
        "pearson_r": report.pearson_r,
        "mean_abs_diff_pct": report.mean_abs_diff_pct,
        "dsc_mean": report.dsc_mean,
        "dsc_sd": report.dsc_sd,
    })
    write_csv(args.out_csv, expected,
              [[cid, repr(est), repr(gt), repr(d)]
               for cid, (est, gt, d) in zip(case_ids, triples)])
    print(f"wrote {args.out_json} (r={report.pearson_r:.4f}, "
          f"mean diff {report.mean_abs_diff_pct:.2f}pp, "
          f"DSC {report.dsc_mean:.3f})")


def _cmd_run(args) -> None:
    cfg = _pipeline_config(args)
    out = run_pipeline(cfg, jobs=args.jobs, run_prediction=not args.no_predict)
    with open(out / "evaluation.json", encoding="utf-8") as fh:
        ev = json.load(fh)
    r = ev["pearson_r"]
    print(f"run complete: {out} (r={'n/a' if r is None else format(r, '.4f')}, "
          f"mean diff {ev['mean_abs_diff_pct']:.2f}pp, DSC {ev['dsc_mean']:.3f})")


def _cmd_sweep(args) -> None:
    cfg = _pipeline_config(args)
    cells, best = param_sweep(cfg, args.sigmas, args.gammas, jobs=args.jobs)
    for i, cell in enumerate(cells):
        status = cell.error or (f"dsc={cell.mean_dsc:.4f} "
                                f"r={'n/a' if cell.pearson_r is None else format(cell.pearson_r, '.4f')}")
        flag = "  <- best" if i == best else ""
        print(f"sigma={cell.sigma_mm:g} gamma={cell.gamma:g}: {status}{flag}")
    if best is None:
        raise StageError("sweep", "-", "every grid cell failed")
    print(f"wrote {Path(cfg.out_dir) / 'sweep.csv'}")


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jacmorph",
        description="Jacobian-map morphometry of blended dual-channel image pairs.")
    parser.add_argument("--version", action="version", version=f"jacmorph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic sphere cohort")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=20, help="number of cases")
    p.add_argument("--change-range", type=float, nargs=2, default=[10.0, 80.0],
                   metavar=("LO", "HI"), help="true volume change span (percent)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("blend", help="blend native-unit CT and PET volumes")
    p.add_argument("--ct", required=True)
    p.add_argument("--pet", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--ct-clip", type=float, default=750.0)
    p.add_argument("--ct-range", type=float, nargs=2, default=[-1000.0, 750.0],
                   metavar=("LO", "HI"))
    p.add_argument("--pet-range", type=float, nargs=2, default=[0.0, 35.0],
                   metavar=("LO", "HI"))
    p.set_defaults(func=_cmd_blend)

    p = sub.add_parser("register", help="register a moving volume to a fixed one")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--engine", choices=["bsd", "ffd"], default="bsd")
    p.add_argument("--channel", choices=["blend", "pet", "ct"], default="blend",
                   help="which channel's registration config to use")
    p.add_argument("--config", help="pipeline config JSON (defaults when omitted)")
    p.add_argument("--out-field", required=True, help="forward field (.mha, 3-channel)")
    p.add_argument("--out-inverse", help="inverse field (.mha)")
    p.add_argument("--trace", help="cost trace CSV")
    p.add_argument("--fixed-mask", help="fixed-image ROI mask (.mha)")
    p.add_argument("--moving-mask", help="moving-image ROI mask (.mha)")
    p.add_argument("--rigidity-prepass", action="store_true",
                   help="rigidity-penalized deformable pre-alignment "
                        "(needs --fixed-mask)")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("jacobian", help="Jacobian-determinant map of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out-jmap", required=True)
    p.add_argument("--report", required=True, help="summary JSON")
    p.add_argument("--mask", help="ROI for the volume-change estimate")
    p.set_defaults(func=_cmd_jacobian)

    p = sub.add_parser("features", help="radiomic features of a Jacobian map")
    p.add_argument("--jmap", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="one-row CSV")
    p.add_argument("--n-bins", type=int, default=32)
    p.add_argument("--case-id", help="defaults to the jmap file stem")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("univariate", help="per-feature AUC and rank-sum p-value")
    p.add_argument("--features", required=True, help="CSV: case_id + feature columns")
    p.add_argument("--labels", required=True, help="CSV: case_id,label (0/1)")
    p.add_argument("--out", required=True, help="CSV sorted by AUC")
    p.set_defaults(func=_cmd_univariate)

    p = sub.add_parser("predict", help="repeated-CV RF-LASSO response model")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-report", required=True, help="metrics JSON")
    p.add_argument("--curve", required=True, help="accuracy-vs-feature-count CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="cohort report from per-case metrics")
    p.add_argument("--cases", required=True,
                   help="CSV: case_id,est_change_pct,gt_change_pct,dsc")
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", help="pipeline config JSON ({} = published defaults)")
    p.add_argument("--out", help="overrides the config's out_dir")
    p.add_argument("--jobs", type=int, default=1, help="case-level workers")
    p.add_argument("--no-predict", action="store_true",
                   help="stop after the evaluation stage")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="mesh-spacing x step-size parameter study")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", help="overrides the config's out_dir")
    p.add_argument("--sigmas", type=float, nargs="+",
                   default=[16.0, 32.0, 64.0, 128.0], help="coarsest mesh spacings (mm)")
    p.add_argument("--gammas", type=float, nargs="+",
                   default=[0.1, 0.15, 0.2, 0.25], help="optimization step sizes")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"jacmorph: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, GeometryError, InputError, DivergedError,
            NotConvergedError, OSError) as exc:
        print(f"jacmorph: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
