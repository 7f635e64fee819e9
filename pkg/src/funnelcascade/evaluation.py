"""Accuracy and speed measurement: detection/ground-truth matching, ROC and
PR curves, recall-at-rejection tables, shape errors, per-stage timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cascade import score_lab_grid, verify_mlp_stage
from .features import compute_lab_map, default_surf_pool, surf_descriptor
from .funnel import DetectParams, detect, iou
from .imaging import (
    CANONICAL_WINDOW,
    ConfigError,
    InputError,
    WindowRect,
    build_pyramid,
    integral_image,
    window_origin_grid,
)


@dataclass
class EvalRecord:
    """Ground truth and detections for one image."""

    image_id: str
    truths: list  # (x, y, w, h) rects
    detections: list  # objects with .x .y .width .height .score
    truth_shapes: list = field(default_factory=list)  # optional Shape4 per truth

    def __post_init__(self):
        if any(not np.isfinite(d.score) for d in self.detections):
            raise InputError(f"{self.image_id}: non-finite detection score")


def match_detections(dets, truths, iou_min: float = 0.5):
    """Greedy one-to-one matching in descending score order.

    Returns (tp, matched): boolean arrays aligned with the input orders. A
    detection is a true positive iff its best-IoU still-unmatched truth
    reaches iou_min.
    """
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.zeros(len(truths), dtype=bool)
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].x, dets[i].y))
    for i in order:
        rect = (dets[i].x, dets[i].y, dets[i].width, dets[i].height)
        best, best_iou = -1, iou_min
        for t, truth in enumerate(truths):
            if matched[t]:
                continue
            v = iou(rect, truth)
            if v >= best_iou:
                best, best_iou = t, v
        if best >= 0:
            tp[i] = True
            matched[best] = True
    return tp, matched


@dataclass
class Curve:
    """Sweep curve points plus scalar readouts."""

    points: list  # (x, y) pairs
    summary: dict


def _flagged_scores(records, iou_min):
    """All detection (score, is_tp) pairs plus the truth count."""
    pairs = []
    n_truths = 0
    for rec in records:
        tp, _ = match_detections(rec.detections, rec.truths, iou_min)
        pairs.extend((d.score, bool(t)) for d, t in zip(rec.detections, tp))
        n_truths += len(rec.truths)
    pairs.sort(key=lambda p: -p[0])
    return pairs, n_truths


def roc_points(records, iou_min: float = 0.5, fp_budget: int = 100) -> Curve:
    """(total false positives, recall) as the score threshold sweeps down."""
    pairs, n_truths = _flagged_scores(records, iou_min)
    points = []
    tp = fp = 0
    dr_at_budget = 0.0
    for score, is_tp in pairs:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recall = tp / n_truths if n_truths else 0.0
        points.append((fp, recall))
        if fp <= fp_budget:
            dr_at_budget = recall
    return Curve(points, {
        "n_truths": n_truths,
        "n_detections": len(pairs),
        f"dr_at_{fp_budget}fps": dr_at_budget,
    })


def pr_points(records, iou_min: float = 0.5) -> Curve:
    """(recall, precision) curve with a trapezoid area summary."""
    pairs, n_truths = _flagged_scores(records, iou_min)
    points = []
    tp = 0
    for k, (score, is_tp) in enumerate(pairs, start=1):
        if is_tp:
            tp += 1
        recall = tp / n_truths if n_truths else 0.0
        points.append((recall, tp / k))
    auc = 0.0
    prev_r, prev_p = 0.0, (points[0][1] if points else 1.0)
    for r, p in points:
        auc += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return Curve(points, {
        "n_truths": n_truths,
        "n_detections": len(pairs),
        "pr_auc": auc,
    })


def write_curve(path, curve: Curve) -> None:
    """Two-column text, one point per line, then a commented summary block."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in curve.points:
            fh.write(f"{x:.6f} {y:.6f}\n")
        for key, value in curve.summary.items():
            fh.write(f"# {key} {value}\n")


# --- stage-prefix rejection ------------------------------------------------

@dataclass
class RejectionReport:
    recall: float
    removal: float
    windows_per_image: float
    windows_grid: int  # denominator: per-scale grid slots
    survivors: int  # deduplicated across views


def _scan_prefix(model, img, stage: int, params: DetectParams):
    """Survivor rects in original coordinates after the stage-`stage` prefix."""
    topo = model.topology
    pool = default_surf_pool()
    rects = []
    total = 0
    for level in build_pyramid(img, params.scale_factor, params.min_face,
                               params.max_face):
        lh, lw = level.image.shape
        xs, ys = window_origin_grid(lw, lh, stride=params.stride)
        if len(xs) == 0 or len(ys) == 0:
            continue
        total += len(xs) * len(ys)
        lab_map = compute_lab_map(level.image)
        accept = {}
        for c in model.lab_cascades:
            scores = score_lab_grid(c, lab_map, xs, ys)
            for j, i in zip(*np.nonzero(scores >= c.threshold)):
                accept.setdefault((int(xs[i]), int(ys[j])), set()).add(c.view_id)
        ii = integral_image(level.image) if stage >= 2 else None
        inv = 1.0 / level.scale
        for (x, y), views in sorted(accept.items()):
            if stage >= 2:
                win = WindowRect(x, y, CANONICAL_WINDOW, CANONICAL_WINDOW)
                ok = False
                for b in sorted({topo.view_to_branch[v] for v in views}):
                    passed = True
                    for st in topo.coarse_branches[b]:
                        feats = np.concatenate(
                            [surf_descriptor(ii, win, pool[g])
                             for g in st.feature_groups])
                        acc, _, _ = verify_mlp_stage(st, feats)
                        if not acc:
                            passed = False
                            break
                    if passed:
                        ok = True
                        break
                if not ok:
                    continue
            rects.append((x * inv, y * inv,
                          CANONICAL_WINDOW * inv, CANONICAL_WINDOW * inv))
    return rects, total


def recall_at_rejection(model, annotated, stage: int = 1,
                        params: DetectParams | None = None) -> RejectionReport:
    """Face recall and window-removal fraction of a funnel prefix.

    annotated is a list of (image, truth rects). A truth counts as recalled
    when at least one surviving window overlaps it with IoU >= 0.5. The
    removal denominator is the per-scale grid count; survivors are
    deduplicated across views (both counts are reported).
    """
    if stage not in (1, 2):
        raise ConfigError("stage cut must be 1 (LAB union) or 2 (coarse)")
    params = params or DetectParams(min_face=CANONICAL_WINDOW)
    n_truth = n_hit = 0
    windows_grid = survivors = 0
    for img, truths in annotated:
        rects, total = _scan_prefix(model, np.asarray(img), stage, params)
        windows_grid += total
        survivors += len(rects)
        for truth in truths:
            n_truth += 1
            if any(iou(r, truth) >= 0.5 for r in rects):
                n_hit += 1
    n_images = max(1, len(annotated))
    removal = 1.0 - survivors / windows_grid if windows_grid else 0.0
    recall = n_hit / n_truth if n_truth else 0.0
    return RejectionReport(recall, removal, survivors / n_images,
                           windows_grid, survivors)


# --- shape error -----------------------------------------------------------

@dataclass
class ShapeErrorReport:
    mean: float
    per_face: np.ndarray
    cdf: list  # (error, fraction of faces at or below)


def shape_error(predicted, truths) -> ShapeErrorReport:
    """Mean landmark distance in rect-width units (shapes are rect-normalized).

    Normalization by rect width rather than inter-ocular distance: profile
    faces carry coincident eye landmarks, so the eye distance degenerates.
    """
    if len(predicted) != len(truths):
        raise InputError(f"{len(predicted)} predictions vs {len(truths)} truths")
    errs = np.array([
        float(np.mean(np.linalg.norm(np.asarray(p.points) - np.asarray(t.points),
                                     axis=1)))
        for p, t in zip(predicted, truths)
    ])
    srt = np.sort(errs)
    cdf = [(float(e), (i + 1) / len(srt)) for i, e in enumerate(srt)]
    return ShapeErrorReport(float(errs.mean()) if len(errs) else 0.0, errs, cdf)


# --- timing ----------------------------------------------------------------

BENCH_REFERENCE = {"width": 640, "height": 480, "min_face": 80}

_STAGE_FIELDS = (
    ("lab_map", "time_lab_map"),
    ("stage1", "time_stage1"),
    ("stage2", "time_stage2"),
    ("stage3", "time_stage3"),
    ("nms", "time_nms"),
)


@dataclass
class BenchReport:
    medians: dict  # stage name -> median seconds per repetition
    cv: dict  # stage name -> coefficient of variation across repetitions
    total_median: float
    repetitions: int
    n_images: int

    def format(self) -> str:
        lines = [f"repetitions {self.repetitions}  images {self.n_images}",
                 "stage  median_ms  cv"]
        for name in self.medians:
            lines.append(f"{name}  {self.medians[name] * 1000:.2f}  "
                         f"{self.cv[name]:.3f}")
        lines.append(f"total  {self.total_median * 1000:.2f}")
        return "\n".join(lines)


def bench_detect(model, images, params: DetectParams | None = None,
                 repetitions: int = 3) -> BenchReport:
    """Median per-stage wall time over repeated single-threaded detect runs."""
    if repetitions < 3:
        raise ConfigError("benchmark needs at least 3 repetitions")
    params = params or DetectParams()
    per_stage = {name: [] for name, _ in _STAGE_FIELDS}
    totals = []
    for _ in range(repetitions):
        acc = {name: 0.0 for name, _ in _STAGE_FIELDS}
        t0 = time.perf_counter()
        for img in images:
            _, stats = detect(model, img, params)
            for name, attr in _STAGE_FIELDS:
                acc[name] += getattr(stats, attr)
        totals.append(time.perf_counter() - t0)
        for name in acc:
            per_stage[name].append(acc[name])
    medians = {name: float(np.median(v)) for name, v in per_stage.items()}
    cv = {}
    for name, v in per_stage.items():
        mean = float(np.mean(v))
        cv[name] = float(np.std(v) / mean) if mean > 0 else 0.0
    return BenchReport(medians, cv, float(np.median(totals)),
                       repetitions, len(images))
