"""Command-line entry point: ``stdaffect <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import features as F
from .datamodel import DatasetManifest, DataError
from .imageprep import ColorCorrectionConfig, prep_directory
from .metrics import evaluate, render_report, report_to_rows
from .model import load_params
from .pipeline import (
    ExperimentConfig,
    StageError,
    make_run_dir,
    report_ablation,
    run_ablation,
    run_pipeline,
    segments_from_manifest,
    load_encoder,
)
from .pseudolabel import balance_classes, generate_pseudo_labels, parse_strategy
from .synth import SynthSpec, make_synthetic

log = logging.getLogger("stdaffect")


def _tiles(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tiles must look like WxH, got {text!r}") from None


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**overrides)
    if getattr(args, "manifest", None):
        cfg = replace(cfg, manifest=Path(args.manifest))
    return cfg


def cmd_synth(args):
    spec = SynthSpec(
        n_subjects=args.subjects,
        n_frames=args.frames,
        d_img=args.d_img,
        d_aud=args.d_aud,
        bias=args.bias,
        images_per_video=args.images,
    )
    out = Path(args.out or "synthetic")
    make_synthetic(out, spec, seed=args.seed or 0)
    print(f"wrote synthetic dataset to {out} (manifest: {out / 'manifest.ini'})")


def cmd_prep_image(args):
    cfg = ColorCorrectionConfig(
        fixed_hue=args.hue,
        target_saturation_mean=args.sat_mean,
        target_value_mean=args.val_mean,
        clahe_clip_limit=args.clip,
        clahe_tiles=args.tiles,
    )
    written = prep_directory(args.in_dir, args.out_dir, cfg)
    print(f"corrected {len(written)} images into {args.out_dir}")


def _read_matrix(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        keys, rows = [], []
        for row in rd:
            keys.append((row[0], row[1]))
            rows.append([float(v) for v in row[2:]])
    return header, keys, np.array(rows)


def cmd_fit_pca(args):
    _, keys, X = _read_matrix(Path(args.input))
    model = F.pca_fit(X, args.components, args.fraction, args.seed or 0)
    out = Path(args.out or "pca.csv")
    model.save(out)
    print(f"PCA with {model.n_components} components written to {out}")
    if args.transform_out:
        Z = F.pca_transform(model, X)
        with open(args.transform_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["video_id", "frame"] + [f"pc_{i}" for i in range(Z.shape[1])])
            for k, z in zip(keys, Z):
                w.writerow(list(k) + [repr(float(v)) for v in z])


def cmd_run(args, **overrides):
    cfg = replace(_load_config(args), **overrides)
    run_dir = make_run_dir(args.out or "runs", cfg.tag)
    stop = "train-single" if args.command == "train-single" else None
    report = run_pipeline(cfg, run_dir=run_dir, stop_after=stop)
    if report is not None:
        print(render_report(report, cfg.tag), end="")
    print(f"run directory: {run_dir}")


def cmd_pseudo_label(args):
    mlp = load_params(args.model)
    encoder = load_encoder(Path(args.model).parent / "encoder.npz")
    manifest = DatasetManifest.from_file(args.input)
    _, segs, _ = segments_from_manifest(manifest)
    candidates = []
    for s in segs:
        X = encoder(s)
        for i, key in enumerate(s.keys()):
            v, a = s.va[i]
            candidates.append({
                "key": key,
                "x": X[i],
                "expression": None if s.expr[i] < 0 else int(s.expr[i]),
                "valence": None if np.isnan(v) else float(v),
                "arousal": None if np.isnan(a) else float(a),
            })
    result = generate_pseudo_labels(mlp, candidates)
    out = Path(args.out or "pseudo_labels.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame", "pseudo_expression", "accepted"])
        for k, c, a in zip(result.keys, result.categories, result.accepted):
            w.writerow([k[0], k[1], int(c), int(a)])
    acc = result.categories[result.accepted]
    print(f"{len(result.keys)} candidates, {int(result.accepted.sum())} accepted, "
          f"{result.excluded} excluded, {result.skipped} skipped")
    if acc.size:
        strategy, cap = parse_strategy(args.balance)
        kept = acc[balance_classes(acc, strategy, cap, seed=args.seed or 0)]
        counts = {int(c): int(n) for c, n in zip(*np.unique(kept, return_counts=True))}
        print(f"balanced ({args.balance}) counts: {counts}")


def _read_keyed(path, columns):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[(row["video_id"], int(row["frame"]))] = [row[c] for c in columns]
            except (KeyError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed row") from None
    return out


def cmd_evaluate(args):
    pred = _read_keyed(args.pred, ["expression"])
    truth = _read_keyed(args.truth, ["expression"])
    keys = sorted(set(pred) & set(truth))
    if not keys:
        raise DataError("no overlapping (video_id, frame) keys between predictions and truth")
    y_pred = [int(pred[k][0]) for k in keys]
    y_true = [int(truth[k][0]) for k in keys]
    va_truth = va_pred = None
    if args.va:
        va_t = _read_keyed(args.va, ["valence", "arousal"])
        pred_va_path = args.pred_va or args.pred
        va_p = _read_keyed(pred_va_path, ["valence", "arousal"])
        vkeys = sorted(set(va_t) & set(va_p))
        if len(vkeys) >= 2:
            va_truth = np.array([[float(x) for x in va_t[k]] for k in vkeys])
            va_pred = np.array([[float(x) for x in va_p[k]] for k in vkeys])
    report = evaluate(y_true, y_pred, va_truth, va_pred)
    report.extras["matched_frames"] = len(keys)
    print(render_report(report, Path(args.pred).stem), end="")
    out = Path(args.out or ".") / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(report_to_rows(report))


def cmd_ablate(args):
    if args.runs:
        print(report_ablation(args.runs), end="")
        return
    cfg = _load_config(args)
    _, table = run_ablation(cfg, args.out or "runs")
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, default):
        parser.add_argument("--config", default=default, help="experiment config (INI)")
        parser.add_argument("--seed", type=int, default=default)
        parser.add_argument("--out", default=default, help="output path or directory")
        parser.add_argument("-v", "--verbose", action="store_true", default=default or False)

    # flags may appear before or after the subcommand; subcommand copies must
    # not overwrite values given before it
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="stdaffect", description=__doc__)
    global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--subjects", type=int, default=20)
    s.add_argument("--frames", type=int, default=600)
    s.add_argument("--d-img", type=int, default=64)
    s.add_argument("--d-aud", type=int, default=32)
    s.add_argument("--bias", type=float, default=5.0)
    s.add_argument("--images", type=int, default=2, help="PPM images per video")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep-image", parents=[common], help="colour-correct a directory of PPM images")
    s.add_argument("--in-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--hue", type=int, default=14)
    s.add_argument("--sat-mean", type=float, default=128.0)
    s.add_argument("--val-mean", type=float, default=128.0)
    s.add_argument("--clip", type=float, default=2.0)
    s.add_argument("--tiles", type=_tiles, default=(8, 8))
    s.set_defaults(func=cmd_prep_image)

    s = sub.add_parser("fit-pca", parents=[common], help="fit PCA on a feature CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--components", type=int, default=300)
    s.add_argument("--fraction", type=float, default=0.01)
    s.add_argument("--transform-out")
    s.set_defaults(func=cmd_fit_pca)

    for name, helptext in (("train-single", "train the single-frame network (with pseudo-label round)"),
                           ("train-multi", "run the full pipeline with the GRU stage enabled"),
                           ("run", "run the pipeline exactly as configured")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest", help="override the manifest named in the config")
        s.set_defaults(func=cmd_run)

    s = sub.add_parser("pseudo-label", parents=[common], help="pseudo-label VA-only frames")
    s.add_argument("--model", required=True, help="mlp.bin from a run directory")
    s.add_argument("--in", dest="input", required=True, help="dataset manifest")
    s.add_argument("--balance", default="min", help="min or cap:N")
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions against labels")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--va")
    s.add_argument("--pred-va", help="VA predictions if not in --pred")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="run the standard ablations or tabulate runs")
    s.add_argument("--manifest")
    s.add_argument("runs", nargs="*", help="existing run directories to tabulate")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train-multi":
            cmd_run(args, multi_frame=True)
        else:
            args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, OSError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
