"""Command-line surface: train, detect, eval, bench, inspect.

Exit codes: 0 success, 2 missing input path, 3 unreadable or invalid input
file (manifest or model), 4 training failure, 5 bad parameter value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .evaluation import (
    BENCH_REFERENCE,
    EvalRecord,
    bench_detect,
    pr_points,
    roc_points,
    write_curve,
)
from .funnel import (
    DetectParams,
    ModelError,
    detect,
    detection_to_dict,
    format_detection,
    load_model,
    save_model,
)
from .imaging import ConfigError, InputError, read_image, write_pgm
from .neural import TrainingError
from .synthetic import negative_texture
from .training import (
    FunnelTrainConfig,
    load_training_data,
    parse_manifest,
    train_funnel,
)

EXIT_OK = 0
EXIT_MISSING = 2
EXIT_BAD_INPUT = 3
EXIT_TRAINING = 4
EXIT_BAD_PARAM = 5


def _parse_views(text):
    """'5', '2', or 'custom:<comma-separated bin edges>' -> (scheme, bins)."""
    if text == "5":
        return "five", None
    if text == "2":
        return "two", None
    if text.startswith("custom:"):
        edges = tuple(float(v) for v in text[len("custom:"):].split(","))
        if len(edges) < 2:
            raise ConfigError("custom views need at least two bin edges")
        return "custom", edges
    raise ConfigError(f"bad --views value {text!r}")


def _detect_params(args) -> DetectParams:
    return DetectParams(stride=args.stride, scale_factor=args.scale_factor,
                        min_face=args.min_face, max_face=args.max_face,
                        nms_iou=args.nms_iou)


class CliExit(Exception):
    """Abort the subcommand with a specific exit code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _require(path, what):
    if not os.path.exists(path):
        raise CliExit(EXIT_MISSING, f"{what} not found: {path}")


def _load_model_checked(path):
    _require(path, "model file")
    try:
        return load_model(path)
    except ModelError as exc:
        raise CliExit(EXIT_BAD_INPUT, str(exc))


def cmd_train(args) -> int:
    _require(args.manifest, "manifest")
    scheme, bins = _parse_views(args.views)
    try:
        manifest = parse_manifest(args.manifest)
        positives, negatives = load_training_data(manifest)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    cfg = FunnelTrainConfig(seed=args.seed, scheme=scheme, custom_bins=bins,
                            augment_factor=args.augment_factor)
    try:
        model, report = train_funnel(positives, negatives, cfg)
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    save_model(model, args.out)
    print(report.format())
    print(f"model written to {args.out}")
    return EXIT_OK


def _overlay(img, detections):
    """Grayscale copy with white detection boxes and landmark dots burned in."""
    out = np.asarray(img).copy()
    h, w = out.shape
    for d in detections:
        x0 = int(np.clip(round(d.x), 0, w - 1))
        y0 = int(np.clip(round(d.y), 0, h - 1))
        x1 = int(np.clip(round(d.x + d.width), 0, w - 1))
        y1 = int(np.clip(round(d.y + d.height), 0, h - 1))
        out[y0:y1 + 1, [x0, x1]] = 255
        out[[y0, y1], x0:x1 + 1] = 255
        for lx, ly in d.landmarks:
            px = int(np.clip(round(lx), 1, w - 2))
            py = int(np.clip(round(ly), 1, h - 2))
            out[py - 1:py + 2, px - 1:px + 2] = 255
    return out


def cmd_detect(args) -> int:
    model = _load_model_checked(args.model)
    try:
        params = _detect_params(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_PARAM
    status = EXIT_OK
    jobs = []
    for path in args.images:
        if not os.path.exists(path):
            print(f"error: image not found: {path}", file=sys.stderr)
            status = EXIT_MISSING
            continue
        try:
            jobs.append((path, read_image(path, allow_png=True)))
        except (InputError, ConfigError, OSError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            status = EXIT_BAD_INPUT

    def run(job):
        return detect(model, job[1], params)

    if args.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for (path, img), (dets, stats) in zip(jobs, results):
            if args.format == "json":
                rec = {"image": path,
                       "detections": [detection_to_dict(d) for d in dets]}
                out.write(json.dumps(rec) + "\n")
            else:
                for d in dets:
                    out.write(f"{path} {format_detection(d)}\n")
            if args.timing:
                out.write(f"# {path} timing_ms lab_map "
                          f"{stats.time_lab_map * 1000:.2f} stage1 "
                          f"{stats.time_stage1 * 1000:.2f} stage2 "
                          f"{stats.time_stage2 * 1000:.2f} stage3 "
                          f"{stats.time_stage3 * 1000:.2f} nms "
                          f"{stats.time_nms * 1000:.2f}\n")
            if args.overlay:
                stem, _ = os.path.splitext(path)
                write_pgm(f"{stem}_overlay.pgm", _overlay(img, dets))
    finally:
        if out is not sys.stdout:
            out.close()
    return status


def cmd_eval(args) -> int:
    model = _load_model_checked(args.model)
    _require(args.manifest, "manifest")
    try:
        manifest = parse_manifest(args.manifest)
        params = _detect_params(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_PARAM
    by_image: dict[str, list] = {}
    for rec in manifest.positives:
        by_image.setdefault(rec.path, []).append(rec.rect)
    records = []
    for path, truths in sorted(by_image.items()):
        img = read_image(path, allow_png=True)
        dets, _ = detect(model, img, params)
        records.append(EvalRecord(path, truths, dets))
    curve = roc_points(records) if args.curve == "roc" else pr_points(records)
    if args.out:
        write_curve(args.out, curve)
        print(f"curve written to {args.out}")
    for key, value in curve.summary.items():
        print(f"{key} {value}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load_model_checked(args.model)
    if args.reps < 3:
        print("error: benchmark needs at least 3 repetitions", file=sys.stderr)
        return EXIT_BAD_PARAM
    if args.images:
        images = []
        for path in args.images:
            _require(path, "image")
            images.append(read_image(path, allow_png=True))
        params = _detect_params(args)
    else:
        # Reference preset: one 640x480 texture scanned at min-face 80.
        rng = np.random.default_rng(0)
        images = [negative_texture(rng, BENCH_REFERENCE["width"],
                                   BENCH_REFERENCE["height"])]
        params = DetectParams(min_face=BENCH_REFERENCE["min_face"])
        print(f"reference preset: {BENCH_REFERENCE['width']}x"
              f"{BENCH_REFERENCE['height']} min-face {params.min_face}")
    report = bench_detect(model, images, params, repetitions=args.reps)
    print(report.format())
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = _load_model_checked(args.model)
    topo = model.topology
    from .features import default_surf_pool

    print("format: fust-model/1")
    print(f"views: {len(model.lab_cascades)}")
    weak_counts = sorted({len(c.weak) for c in model.lab_cascades})
    print(f"LAB weak per view: {'/'.join(str(n) for n in weak_counts)}")
    for c in model.lab_cascades:
        print(f"  view {c.view_id}: {len(c.weak)} weak, "
              f"threshold {c.threshold:.4f}")
    print(f"view_to_branch: {topo.view_to_branch}")
    print(f"coarse branches: {len(topo.coarse_branches)}")
    for b, branch in enumerate(topo.coarse_branches):
        for s, stage in enumerate(branch):
            print(f"  branch {b} stage {s}: groups {len(stage.feature_groups)} "
                  f"dims {list(stage.model.layer_dims)} "
                  f"threshold {stage.threshold:.4f}")
    print(f"fine stages: {len(topo.fine_cascade)}")
    for s, stage in enumerate(topo.fine_cascade):
        print(f"  fine stage {s}: dims {list(stage.model.layer_dims)} "
              f"head {stage.model.head} threshold {stage.threshold:.4f}")
    print(f"SURF pool patches: {len(default_surf_pool())}")
    print(f"SURF pool hash: {model.pool_hash}")
    if "lam" in model.metadata:
        print(f"shape loss weight: {model.metadata['lam']}")
    if model.metadata:
        print(f"metadata: {json.dumps(model.metadata, sort_keys=True)}")
    return EXIT_OK


def _add_detect_flags(p):
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--scale-factor", type=float, default=1.25)
    p.add_argument("--min-face", type=int, default=80)
    p.add_argument("--max-face", type=int, default=None)
    p.add_argument("--nms-iou", type=float, default=0.3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funnelcascade",
        description="Multi-view face detection with a funnel-structured cascade")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", default="5", help="5, 2, or custom:<edges>")
    p.add_argument("--augment-factor", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect faces in images")
    p.add_argument("--model", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--out", default=None, help="write lines here instead of stdout")
    _add_detect_flags(p)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--overlay", action="store_true",
                   help="write *_overlay.pgm copies with boxes and landmarks")
    p.add_argument("--timing", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--curve", choices=("roc", "pr"), default="roc")
    p.add_argument("--out", default=None, help="curve file path")
    _add_detect_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage timing benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("images", nargs="*")
    p.add_argument("--reps", type=int, default=5)
    _add_detect_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print the model architecture summary")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_PARAM
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
