"""``conf3d`` command line: evaluation, rescoring, scorer training, splits, oracle sweeps."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .confidence import (
    ConfidenceTargetConfig,
    Scorer,
    TrainingDivergedError,
    TrainOptions,
    calibration_bins,
    calibration_csv,
    read_records_csv,
    train_scorer,
)
from .evaluation import DEFAULT_IOU, DIFFICULTIES, evaluate
from .geo_split import geosep_filter, overlap_audit, split_train_val
from .kitti_io import (
    CLASS_IDS,
    parse_detection_file,
    parse_label_file,
    parse_split_manifest,
    read_pose_csv,
    with_score3d,
    write_detection_file,
    write_split_manifest,
)
from .oracle import COMPONENTS, oracle_sweep, tables_json
from .synth import generate_corpus, load_noise_profile, write_corpus

log = logging.getLogger("conf3d")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in _csv_list(text))


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("CONF3D_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise InputError(f"CONF3D_THREADS must be an integer, got {env!r}") from None


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _frame_ids(gt_dir: Path, split) -> list[str]:
    if split:
        return list(parse_split_manifest(_read(split), name=Path(split).stem).frame_ids)
    if not gt_dir.is_dir():
        raise InputError(f"ground-truth directory {gt_dir} does not exist")
    return sorted(p.stem for p in gt_dir.glob("*.txt"))


def _load_frames(gt_dir, det_dir, split, allow_missing: bool):
    gt_dir, det_dir = Path(gt_dir), Path(det_dir)
    ids = _frame_ids(gt_dir, split)
    missing_gt = [f for f in ids if not (gt_dir / f"{f}.txt").is_file()]
    if missing_gt:
        raise InputError(f"missing ground-truth files for frames {missing_gt}")
    missing_det = [f for f in ids if not (det_dir / f"{f}.txt").is_file()]
    if missing_det and not allow_missing:
        raise InputError(f"missing detection files for frames {missing_det} (pass --allow-missing to treat as empty)")
    gts, dets = {}, {}
    for f in ids:
        gts[f] = parse_label_file(_read(gt_dir / f"{f}.txt"))
        path = det_dir / f"{f}.txt"
        dets[f] = parse_detection_file(_read(path)) if path.is_file() else []
    return gts, dets


def _mirror(out, primary_csv: str, payload_json: str) -> None:
    out = Path(out)
    _write(out.with_suffix(".csv"), primary_csv)
    _write(out.with_suffix(".json"), payload_json)


# -- subcommands --------------------------------------------------------------


def cmd_eval(args) -> int:
    gts, dets = _load_frames(args.gt, args.det, args.split, args.allow_missing)
    metrics = {"3d": ("3D",), "bev": ("BEV",), "both": ("3D", "BEV")}[args.metric]
    thr = dict(DEFAULT_IOU)
    thr.update({"Car": args.iou_car, "Pedestrian": args.iou_ped, "Cyclist": args.iou_cyc})
    res = evaluate(dets, gts, classes=_csv_list(args.classes), difficulties=DIFFICULTIES, metrics=metrics,
                   kind=args.ap, iou_thresholds=thr, threads=_threads(args))
    text = res.to_csv()
    if args.out:
        _mirror(args.out, text, res.to_json())
    sys.stdout.write(text)
    return EXIT_OK


def _read_features(path) -> dict[str, dict[int, tuple[float, ...]]]:
    rows = list(csv.reader(io.StringIO(_read(path))))
    if not rows or rows[0][:2] != ["frame_id", "det_index"]:
        raise InputError(f"{path}: features CSV must start with frame_id,det_index")
    out: dict[str, dict[int, tuple[float, ...]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out.setdefault(row[0], {})[int(row[1])] = tuple(float(v) for v in row[2:])
        except ValueError:
            raise InputError(f"{path}: line {lineno}: non-numeric field") from None
    return out


def cmd_rescore(args) -> int:
    try:
        scorer = Scorer.from_json(_read(args.scorer))
    except (ValueError, KeyError) as exc:
        raise InputError(f"{args.scorer}: invalid scorer file ({exc})") from None
    feats = _read_features(args.features)
    det_dir, out_dir = Path(args.det), Path(args.out)
    if not det_dir.is_dir():
        raise InputError(f"detection directory {det_dir} does not exist")
    mode = "combined" if args.mode == "combined" else "score3d"
    outputs = {}
    for path in sorted(det_dir.glob("*.txt")):
        dets = parse_detection_file(_read(path))
        fmap = feats.get(path.stem, {})
        if sorted(fmap) != list(range(len(dets))):
            raise InputError(f"frame {path.stem}: {len(dets)} detections but features for indices {sorted(fmap)}")
        if dets:
            x = np.array([fmap[k] for k in range(len(dets))], dtype=float)
            if x.shape[1] != scorer.widths[0]:
                raise InputError(f"frame {path.stem}: feature width {x.shape[1]} != scorer input {scorer.widths[0]}")
            cls = [CLASS_IDS.get(d.class_name, 0) for d in dets]
            s3d = scorer.predict(x, cls)
            dets = [with_score3d(d, float(s)) for d, s in zip(dets, s3d)]
        outputs[path.name] = write_detection_file(dets, score_mode=mode, combine=args.combine)
    for name, text in outputs.items():
        _write(out_dir / name, text)
    log.info("rescored %d frames into %s", len(outputs), out_dir)
    return EXIT_OK


def _beta_tag(b: float) -> str:
    return f"{b:g}"


def cmd_train_conf(args) -> int:
    try:
        records = read_records_csv(_read(args.records))
    except ValueError as exc:
        raise InputError(f"{args.records}: {exc}") from None
    betas = [float(b) for b in _csv_list(args.beta)]
    if not betas:
        raise InputError("--beta needs at least one value")
    if args.mode == "relative":
        betas = betas[:1]  # no temperature in relative mode
    opts = TrainOptions(epochs=args.epochs, lr=args.lr, batch_size=args.batch, milestones=_int_list(args.milestones),
                        hidden=_int_list(args.hidden), per_class_heads=not args.shared_head, seed=args.seed)
    out = Path(args.out)
    for beta in betas:
        cfg = ConfidenceTargetConfig(mode=args.mode, beta=beta, loss_weight=args.loss_weight)
        scorer = train_scorer(records, cfg, opts)
        path = out if len(betas) == 1 else out.with_name(f"{out.stem}_beta{_beta_tag(beta)}{out.suffix}")
        _write(path, scorer.to_json())
        first, last = (scorer.history[0], scorer.history[-1]) if scorer.history else (0.0, 0.0)
        print(f"{path}: mode={args.mode} beta={_beta_tag(beta)} loss {first:.6f} -> {last:.6f}")
    return EXIT_OK


def _poses(path):
    return read_pose_csv(_read(path))


def cmd_geosep(args) -> int:
    res = geosep_filter(_poses(args.candidates), _poses(args.protected), radius_m=args.radius,
                        exclude_sequences=args.exclude_sequences, use_grid=not args.no_grid,
                        threads=_threads(args), name="geosep")
    report = json.loads(res.report.to_json())
    train, val = split_train_val(res.manifest, args.val_size, args.seed)
    report.update(train_size=len(train), val_size=len(val), seed=args.seed)
    if args.out_train:
        _write(args.out_train, write_split_manifest(train))
    if args.out_val:
        _write(args.out_val, write_split_manifest(val))
    text = json.dumps(report, indent=2) + "\n"
    if args.report:
        _write(args.report, text)
    sys.stdout.write(text)
    return EXIT_OK if res.report.verification_passed else EXIT_NUMERIC


def cmd_audit(args) -> int:
    a = parse_split_manifest(_read(args.split_a), name=Path(args.split_a).stem)
    b = parse_split_manifest(_read(args.split_b), name=Path(args.split_b).stem)
    poses = _poses(args.poses) if args.poses else []
    text = overlap_audit(a, b, poses).to_json()
    if args.report:
        _write(args.report, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    gts, dets = _load_frames(args.gt, args.det, args.split, args.allow_missing)
    comps = _csv_list(args.components)
    bad = [c for c in comps if c not in COMPONENTS]
    if bad:
        raise InputError(f"unknown oracle components {bad}; expected a subset of {','.join(COMPONENTS)}")
    metric = {"3d": "3D", "bev": "BEV"}[args.metric]
    policies = [args.match_policy] + [p for p in ("center", "iou2d") if p != args.match_policy]
    tables = [oracle_sweep(dets, gts, comps, class_name=args.class_name, metric=metric, kind=args.ap,
                           match_policy=p, threads=_threads(args)) for p in policies]
    text = tables[0].to_csv()
    if args.out:
        _mirror(args.out, text, tables_json(tables))
    sys.stdout.write(text)
    return EXIT_OK


def _read_values(path) -> np.ndarray:
    vals = []
    for lineno, line in enumerate(_read(path).splitlines(), start=1):
        tok = line.split(",")[-1].strip()
        if not tok:
            continue
        try:
            vals.append(float(tok))
        except ValueError:
            if lineno == 1:
                continue  # header
            raise InputError(f"{path}: line {lineno}: not a number: {tok!r}") from None
    return np.array(vals, dtype=float)


def cmd_calib(args) -> int:
    preds, realized = _read_values(args.preds), _read_values(args.realized)
    if len(preds) != len(realized):
        raise InputError(f"{len(preds)} predictions vs {len(realized)} realized values")
    bins = calibration_bins(preds, realized, args.bins)
    text = calibration_csv(bins)
    if args.out:
        payload = {"n_bins": args.bins, "bins": [asdict(b) for b in bins]}
        _mirror(args.out, text, json.dumps(payload, indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        noise = load_noise_profile(args.noise_profile)
    except OSError as exc:
        raise InputError(f"cannot read noise profile {args.noise_profile}: {exc}") from None
    corpus = generate_corpus(args.frames, args.objects, noise, seed=args.seed, first_frame=args.first_frame)
    write_corpus(corpus, args.out)
    n_det = sum(len(d) for d in corpus.dets.values())
    print(f"wrote {len(corpus.frame_ids)} frames, {n_det} detections, {len(corpus.records)} train records to {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conf3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None, help="frame-level workers (env CONF3D_THREADS)")

    e = sub.add_parser("eval", help="AP|R40 / AP|R11 evaluation of a detection directory")
    e.add_argument("--gt", required=True)
    e.add_argument("--det", required=True)
    e.add_argument("--split")
    e.add_argument("--classes", default="Car")
    e.add_argument("--metric", choices=("3d", "bev", "both"), default="both")
    e.add_argument("--ap", choices=("r40", "r11"), default="r40")
    e.add_argument("--iou-car", type=float, default=DEFAULT_IOU["Car"])
    e.add_argument("--iou-ped", type=float, default=DEFAULT_IOU["Pedestrian"])
    e.add_argument("--iou-cyc", type=float, default=DEFAULT_IOU["Cyclist"])
    e.add_argument("--allow-missing", action="store_true", help="treat missing detection files as empty")
    e.add_argument("--out", help="report path; CSV and JSON are written side by side")
    threads(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rescore", help="attach 3D confidence and rewrite detection scores")
    r.add_argument("--det", required=True)
    r.add_argument("--scorer", required=True)
    r.add_argument("--features", required=True)
    r.add_argument("--mode", choices=("combined", "3d-only"), default="combined")
    r.add_argument("--combine", choices=("product", "mean"), default="product")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rescore)

    t = sub.add_parser("train-conf", help="train an absolute or relative 3D-confidence scorer")
    t.add_argument("--records", required=True)
    t.add_argument("--mode", choices=("absolute", "relative"), default="relative")
    t.add_argument("--beta", default="1", help="temperature; a comma list trains one scorer per value")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--hidden", default="512,512")
    t.add_argument("--milestones", default="20,40")
    t.add_argument("--loss-weight", type=float, default=1.0)
    t.add_argument("--shared-head", action="store_true", help="one output for all classes")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_conf)

    g = sub.add_parser("geosep", help="build a split geographically separated from protected frames")
    g.add_argument("--candidates", required=True)
    g.add_argument("--protected", required=True)
    g.add_argument("--radius", type=float, default=200.0)
    g.add_argument("--exclude-sequences", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--val-size", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-train")
    g.add_argument("--out-val")
    g.add_argument("--report")
    g.add_argument("--no-grid", action="store_true", help="skip the lat/lon grid prefilter")
    threads(g)
    g.set_defaults(func=cmd_geosep)

    a = sub.add_parser("audit", help="frame and sequence overlap between two splits")
    a.add_argument("--split-a", required=True)
    a.add_argument("--split-b", required=True)
    a.add_argument("--poses")
    a.add_argument("--report")
    a.set_defaults(func=cmd_audit)

    o = sub.add_parser("oracle", help="ground-truth substitution sweep")
    o.add_argument("--gt", required=True)
    o.add_argument("--det", required=True)
    o.add_argument("--split")
    o.add_argument("--components", default=",".join(COMPONENTS))
    o.add_argument("--class", dest="class_name", default="Car")
    o.add_argument("--metric", choices=("3d", "bev"), default="3d")
    o.add_argument("--ap", choices=("r40", "r11"), default="r40")
    o.add_argument("--match-policy", choices=("center", "iou2d"), default="center")
    o.add_argument("--allow-missing", action="store_true")
    o.add_argument("--out")
    threads(o)
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("calib", help="binned calibration table (plot-ready CSV)")
    c.add_argument("--preds", required=True)
    c.add_argument("--realized", required=True)
    c.add_argument("--bins", type=int, default=10)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calib)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--objects", type=int, default=6)
    s.add_argument("--noise-profile", default="default", help="JSON/TOML file or a built-in profile name")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--first-frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"conf3d: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ValueError, KeyError, OSError) as exc:
        print(f"conf3d: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
