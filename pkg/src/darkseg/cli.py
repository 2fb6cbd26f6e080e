"""Command-line entry point: ``darkseg <subcommand> ...``.

Exit status is 0 on success, 2 when inputs fail validation and 1 on any
other error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bilateral import BilateralParams, auto_downsample
from .config import load_config
from .consistency import Agreement, annotation_consistency
from .core import ClassSet, ValidationError, as_labels, validate_pair
from .curriculum import load_plan_config, plan, run_plan
from .gps import smooth_track, match_nearest
from .io import (LABEL_SUFFIX, SOFT_SUFFIX, fmt, pair_dirs, read_label_png, read_manifest, read_mask_png,
                 read_rgb, read_soft, stems, write_curve_csv, write_label_png, write_matches_csv, write_soft)
from .metrics import SweepAccumulator, UIoUCurve, default_grid, evaluate_hard, exact_grid
from .plotting import plot_uiou_curves
from .refine import FusionParams, refine_guided

log = logging.getLogger("darkseg")

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2
CONF_SUFFIX = ".npy"


def _open_out(path):
    if path is None or str(path) == "-":
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


# -- evaluate -------------------------------------------------------------------

def _hard_curve(tallies, classes: ClassSet, invalidated: int) -> UIoUCurve:
    counts = tallies.as_rows()[None]
    return UIoUCurve(np.array([classes.min_confidence]), classes.names, counts, np.array([invalidated]))


def cmd_evaluate(args, cfg) -> int:
    classes = cfg.classes
    C = classes.num_classes
    if args.soft_dir:
        rows = pair_dirs((args.gt_dir, LABEL_SUFFIX), (args.mask_dir, LABEL_SUFFIX), (args.soft_dir, SOFT_SUFFIX))
    elif args.conf_dir:
        rows = pair_dirs((args.gt_dir, LABEL_SUFFIX), (args.mask_dir, LABEL_SUFFIX),
                         (args.pred_dir, LABEL_SUFFIX), (args.conf_dir, CONF_SUFFIX))
    else:
        rows = pair_dirs((args.gt_dir, LABEL_SUFFIX), (args.mask_dir, LABEL_SUFFIX), (args.pred_dir, LABEL_SUFFIX))

    def load(row):
        gt = as_labels(read_label_png(row[0]), classes)
        mask = read_mask_png(row[1])
        if args.soft_dir:
            soft = read_soft(row[2])
            if soft.shape[0] != C:
                raise ValidationError(f"{row[2]}: {soft.shape[0]} channels, class set has {C}")
            return gt, mask, soft.argmax(axis=0), soft.max(axis=0)
        pred = as_labels(read_label_png(row[2]), classes, allow_invalid=not args.conf_dir)
        conf = np.load(row[3]) if args.conf_dir else None
        return gt, mask, pred, conf

    if args.soft_dir or args.conf_dir:
        if args.exact:
            # two passes: collect every distinct confidence, then sweep
            grid = exact_grid((load(r)[3] for _, r in rows), C)
        else:
            grid = default_grid(C, args.theta_grid or cfg.grid_size)
        acc = SweepAccumulator(classes, grid)
        for stem, row in rows:
            gt, mask, labels, conf = load(row)
            if np.shape(conf) != gt.shape:
                raise ValidationError(f"{stem}: confidence map shape {np.shape(conf)} != label shape {gt.shape}")
            acc.add(gt, mask, labels, conf)
        curve = acc.curve()
    else:
        gts, masks, preds = zip(*[load(r)[:3] for _, r in rows])
        inv = sum(int((p == 254).sum()) for p in preds)
        curve = _hard_curve(evaluate_hard(gts, masks, preds, classes), classes, inv)

    fh, close = _open_out(args.curve_out)
    try:
        write_curve_csv(curve, fh)
    finally:
        if close:
            fh.close()
    plot_path = args.plot_out
    if plot_path is None and args.curve_out and args.curve_out != "-" and not args.no_plot:
        plot_path = str(Path(args.curve_out).with_suffix(".svg"))
    if plot_path and not args.no_plot:
        plot_uiou_curves(curve, plot_path)
    theta, best = curve.best
    print(f"images={len(rows)} mIoU={fmt(100 * curve.iou)} max_mUIoU={fmt(100 * best)} theta*={fmt(theta)}",
          file=sys.stderr if fh is sys.stdout else sys.stdout)
    return EXIT_OK


# -- refine ---------------------------------------------------------------------

def cmd_refine(args, cfg) -> int:
    dark = read_soft(args.dark_soft)
    day = read_soft(args.day_soft)
    rgb = read_rgb(args.dark_image)
    base = cfg.bilateral or BilateralParams(downsample_factor=auto_downsample(dark.shape))
    over = {k: v for k, v in (("sigma_s", args.sigma_s), ("sigma_r", args.sigma_r),
                              ("downsample_factor", args.downsample), ("precision", args.precision)) if v is not None}
    try:
        bilateral = BilateralParams(**{**base.__dict__, **over})
        fusion = FusionParams(**{**cfg.fusion.__dict__, **{k: v for k, v in (
            ("alpha_l", args.alpha_l), ("alpha_h", args.alpha_h), ("eta", args.eta)) if v is not None}})
    except ValueError as e:
        raise ValidationError(str(e)) from e
    ref = refine_guided(dark, rgb, day, cfg.classes, bilateral, fusion)
    if args.out_labels:
        write_label_png(args.out_labels, ref.labels)
    if args.out_soft:
        write_soft(args.out_soft, ref.soft)
    print(f"refined {ref.labels.shape[1]}x{ref.labels.shape[0]} in {ref.seconds:.2f}s "
          f"(downsample {bilateral.downsample_factor})")
    return EXIT_OK


# -- match ----------------------------------------------------------------------

def cmd_match(args, cfg) -> int:
    queries = read_manifest(args.query_manifest).gps_items()
    refs = read_manifest(args.day_manifest).gps_items()
    window = args.smooth_window if args.smooth_window is not None else cfg.smooth_window
    if window > 1:
        queries = list(zip([q for q, _ in queries], smooth_track([f for _, f in queries], window)))
        refs = list(zip([r for r, _ in refs], smooth_track([f for _, f in refs], window)))
    max_dist = args.max_dist if args.max_dist is not None else cfg.max_dist
    matches = match_nearest(queries, refs, max_dist)
    fh, close = _open_out(args.out)
    try:
        write_matches_csv(matches, fh)
    finally:
        if close:
            fh.close()
    n = sum(m.matched for m in matches)
    print(f"matched {n}/{len(matches)} within {fmt(max_dist)} m", file=sys.stderr)
    return EXIT_OK


# -- curriculum -----------------------------------------------------------------

def cmd_curriculum(args, cfg) -> int:
    domains, step_cfg = load_plan_config(args.plan_config)
    steps = plan(domains, step_cfg)
    reports = run_plan(steps, step_cfg, dry_run=args.dry_run)
    print(json.dumps([json.loads(r.to_json()) for r in reports], indent=2, sort_keys=True))
    return EXIT_OK


# -- consistency ----------------------------------------------------------------

def cmd_consistency(args, cfg) -> int:
    rows = pair_dirs((Path(args.dir_a) / "labels", LABEL_SUFFIX), (Path(args.dir_a) / "masks", LABEL_SUFFIX),
                     (Path(args.dir_b) / "labels", LABEL_SUFFIX), (Path(args.dir_b) / "masks", LABEL_SUFFIX))
    total = Agreement()
    for _, (la, ma, lb, mb) in rows:
        total = total + annotation_consistency((read_label_png(la), read_label_png(ma)),
                                               (read_label_png(lb), read_label_png(mb)), cfg.classes)
    sem = total.semantic_percent
    print(f"images={len(rows)} semantic_agreement={'n/a' if sem is None else fmt(sem) + '%'} "
          f"mask_agreement={fmt(total.mask_percent)}%")
    return EXIT_OK


# -- validate -------------------------------------------------------------------

def _validate_manifest(path, classes) -> list[str]:
    man = read_manifest(path)
    problems = [f"{rid}: missing file {p}" for rid, p in man.missing_files()]
    for r in man:
        lab, msk = man.resolve(r.label_path), man.resolve(r.invalid_mask_path)
        if lab is None or not lab.exists() or r.origin == "pseudo_real":
            continue
        labels = read_label_png(lab)
        mask = read_label_png(msk) if msk is not None and msk.exists() else np.zeros_like(labels)
        rep = validate_pair(labels, mask, classes)
        if not rep.ok:
            problems.append(f"{r.id}: {rep.summary()}")
    print(f"{path}: {len(man)} records")
    return problems


def _validate_dir(path, masks, classes) -> list[str]:
    problems = []
    if masks:
        rows = pair_dirs((path, LABEL_SUFFIX), (masks, LABEL_SUFFIX))
    else:
        rows = [(s, [p]) for s, p in stems(path, LABEL_SUFFIX).items()]
        if not rows:
            raise ValidationError(f"no *{LABEL_SUFFIX} files in {path}")
    for stem, row in rows:
        labels = read_label_png(row[0])
        mask = read_label_png(row[1]) if masks else np.zeros_like(labels)
        rep = validate_pair(labels, mask, classes)
        print(f"{stem}: {rep.summary()}")
        if not rep.ok:
            problems.append(f"{stem}: {rep.summary()}")
    return problems


def cmd_validate(args, cfg) -> int:
    p = Path(args.path)
    if p.is_dir():
        problems = _validate_dir(p, args.masks, cfg.classes)
    elif p.is_file():
        problems = _validate_manifest(p, cfg.classes)
    else:
        raise FileNotFoundError(f"no such file or directory: {p}")
    for msg in problems:
        print(msg, file=sys.stderr)
    if problems:
        print(f"{len(problems)} problems found", file=sys.stderr)
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="darkseg", description="Uncertainty-aware evaluation and guided refinement for dark-image segmentation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $DARKSEG_CONFIG)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="UIoU threshold sweep over a labeled set")
    p.add_argument("gt_dir")
    p.add_argument("mask_dir")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred-dir", help="hard predictions (PNG; may contain the invalid label 254)")
    src.add_argument("--soft-dir", help="soft predictions (.sftp)")
    p.add_argument("--conf-dir", help="with --pred-dir: per-image confidence maps (.npy) enabling the sweep")
    p.add_argument("--theta-grid", type=int, metavar="N", help="number of uniform thresholds in [1/C, 1]")
    p.add_argument("--exact", action="store_true", help="sweep every distinct confidence instead of a grid")
    p.add_argument("--curve-out", help="curve CSV (default: stdout)")
    p.add_argument("--plot-out", help="figure path (.svg/.png); defaults to the CSV path with .svg")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("refine", parents=[common], help="refine a dark prediction with daytime guidance")
    p.add_argument("dark_soft")
    p.add_argument("dark_image")
    p.add_argument("day_soft")
    p.add_argument("--out-labels")
    p.add_argument("--out-soft")
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--downsample", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--alpha-l", type=float)
    p.add_argument("--alpha-h", type=float)
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("match", parents=[common], help="GPS correspondences to daytime frames")
    p.add_argument("query_manifest")
    p.add_argument("day_manifest")
    p.add_argument("--max-dist", type=float, help="meters (default 50)")
    p.add_argument("--smooth-window", type=int, help="median-smooth both tracks first")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("curriculum", parents=[common], help="run the adaptation schedule")
    p.add_argument("plan_config")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_curriculum)

    p = sub.add_parser("consistency", parents=[common], help="agreement of two annotation sets")
    p.add_argument("dir_a", help="directory with labels/ and masks/")
    p.add_argument("dir_b")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("validate", parents=[common], help="check a manifest or a label directory")
    p.add_argument("path")
    p.add_argument("--masks", help="invalid-mask directory paired with a label directory")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "conf_dir", None) and not getattr(args, "pred_dir", None):
            raise ValidationError("--conf-dir requires --pred-dir")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ValidationError, FileNotFoundError) as e:
        print(f"darkseg: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.debug("traceback", exc_info=True)
        print(f"darkseg: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
