"""Funnel orchestration: per-view LAB proposal feeding branch-shared coarse
MLP stages and one unified fine MLP cascade, plus NMS and model files."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .cascade import (
    LabCascadeModel,
    LabWeakClassifier,
    MlpStage,
    score_lab_grid,
    verify_mlp_stage,
)
from .features import (
    LabFeatureLocator,
    Shape4,
    compute_lab_map,
    default_surf_pool,
    shape_indexed_features,
    surf_group_features,
)
from .imaging import (
    CANONICAL_WINDOW,
    ConfigError,
    WindowRect,
    build_pyramid,
    integral_image,
    window_origin_grid,
)
from .neural import MlpModel

MODEL_FORMAT = "fust-model/1"


class ModelError(Exception):
    """Base class for model file problems."""


class ModelFormatError(ModelError):
    """File is not parseable as a model of any version."""


class ModelVersionError(ModelError):
    """Model format tag does not match this implementation."""


class ModelHashError(ModelError):
    """Recorded SURF pool hash differs from the built-in pool."""


class ModelInvariantError(ModelError):
    """Parsed model violates a structural invariant."""


def surf_pool_hash() -> str:
    """SHA-256 of the canonical 56-patch pool enumeration."""
    text = ";".join(f"{p.x},{p.y},{p.width},{p.height}" for p in default_surf_pool())
    return hashlib.sha256(text.encode("ascii")).hexdigest()


@dataclass
class FunnelTopology:
    """Routing from view cascades to coarse branches plus the shared tail."""

    view_to_branch: list  # view id -> coarse branch index
    coarse_branches: list  # per branch: list of MlpStage
    fine_cascade: list  # list of joint MlpStage
    mean_shape: Shape4

    def __post_init__(self):
        n_branches = len(self.coarse_branches)
        for v, b in enumerate(self.view_to_branch):
            if not 0 <= b < n_branches:
                raise ModelInvariantError(f"view {v} maps to missing branch {b}")
        if not self.fine_cascade:
            raise ModelInvariantError("fine cascade must have at least one stage")
        for stage in self.fine_cascade:
            if stage.model.head != "joint":
                raise ModelInvariantError("fine cascade stages must have joint heads")


@dataclass
class FunnelModel:
    """The complete detector."""

    lab_cascades: list  # one LabCascadeModel per view
    topology: FunnelTopology
    pool_hash: str = field(default_factory=surf_pool_hash)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        view_ids = [c.view_id for c in self.lab_cascades]
        if sorted(view_ids) != list(range(len(view_ids))):
            raise ModelInvariantError(f"view ids {view_ids} are not 0..v-1")
        if len(self.topology.view_to_branch) != len(self.lab_cascades):
            raise ModelInvariantError("topology covers a different view count")
        if self.pool_hash != surf_pool_hash():
            raise ModelHashError("model SURF pool hash does not match built-in pool")


@dataclass
class Detection:
    """Final detection in original-image pixels."""

    x: float
    y: float
    width: float
    height: float
    score: float
    landmarks: list  # 4 (x, y) pairs in original-image pixels
    views: frozenset


@dataclass
class DetectStats:
    windows_total: int = 0
    after_stage1: int = 0
    after_stage2: int = 0
    after_stage3: int = 0
    lab_maps_built: int = 0
    time_lab_map: float = 0.0
    time_stage1: float = 0.0
    time_stage2: float = 0.0
    time_stage3: float = 0.0
    time_nms: float = 0.0


@dataclass
class DetectParams:
    stride: int = 2
    scale_factor: float = 1.25
    min_face: int = 80
    max_face: int | None = None
    nms_iou: float = 0.3

    def __post_init__(self):
        if not 0 < self.nms_iou < 1:
            raise ConfigError("nms_iou must be in (0, 1)")


def iou(a, b) -> float:
    """Intersection-over-union of two (x, y, w, h) rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(detections, iou_threshold: float = 0.3):
    """Greedy NMS: keep score-descending detections that overlap no kept one.

    Ties are broken by lexicographic rect order so the result is independent
    of input order.
    """
    if not 0 < iou_threshold < 1:
        raise ConfigError("iou_threshold must be in (0, 1)")
    ordered = sorted(detections,
                     key=lambda d: (-d.score, d.x, d.y, d.width, d.height))
    kept = []
    for det in ordered:
        rect = (det.x, det.y, det.width, det.height)
        if all(iou(rect, (k.x, k.y, k.width, k.height)) < iou_threshold
               for k in kept):
            kept.append(det)
    return kept


def _branch_verify(stages, ii, window):
    """Run a coarse branch's stage chain on one window; (accepted, last score)."""
    pool = default_surf_pool()
    score = 0.0
    for stage in stages:
        feats = surf_group_features(ii, window, pool, stage.feature_groups)
        accept, score, _ = verify_mlp_stage(stage, feats)
        if not accept:
            return False, score
    return True, score


def _fine_verify(fine_stages, crop, mean_shape):
    """Unified fine cascade on a canonical crop; returns (accepted, score, shape)."""
    shape = mean_shape
    score = 0.0
    for stage in fine_stages:
        feats = shape_indexed_features(crop, shape)
        accept, score, refined = verify_mlp_stage(stage, feats)
        if not accept:
            return False, score, shape
        shape = refined
    return True, score, shape


def detect(model: FunnelModel, img: np.ndarray,
           params: DetectParams | None = None):
    """Scan an image through the funnel; returns (detections, stats)."""
    params = params or DetectParams()
    img = np.asarray(img)
    stats = DetectStats()
    topo = model.topology
    pre_nms: list[Detection] = []
    levels = build_pyramid(img, params.scale_factor, params.min_face,
                           params.max_face)
    for level in levels:
        lh, lw = level.image.shape
        xs, ys = window_origin_grid(lw, lh, stride=params.stride)
        if len(xs) == 0 or len(ys) == 0:
            continue
        stats.windows_total += len(xs) * len(ys)

        t0 = time.perf_counter()
        lab_map = compute_lab_map(level.image)
        stats.lab_maps_built += 1
        t1 = time.perf_counter()
        stats.time_lab_map += t1 - t0

        # Stage 1: union proposal over all views, vectorized per view.
        accept_views = {}
        for cascade in model.lab_cascades:
            scores = score_lab_grid(cascade, lab_map, xs, ys)
            for j, i in zip(*np.nonzero(scores >= cascade.threshold)):
                accept_views.setdefault((int(xs[i]), int(ys[j])),
                                        set()).add(cascade.view_id)
        survivors1 = sorted(accept_views.items())
        stats.after_stage1 += len(survivors1)
        t2 = time.perf_counter()
        stats.time_stage1 += t2 - t1

        # Stage 2: each survivor runs once per distinct branch its views imply.
        ii = integral_image(level.image)
        survivors2 = []
        for (x, y), views in survivors1:
            win = WindowRect(x, y, CANONICAL_WINDOW, CANONICAL_WINDOW,
                             level.index)
            branches = {topo.view_to_branch[v] for v in views}
            if any(_branch_verify(topo.coarse_branches[b], ii, win)[0]
                   for b in sorted(branches)):
                survivors2.append((win, frozenset(views)))
        stats.after_stage2 += len(survivors2)
        t3 = time.perf_counter()
        stats.time_stage2 += t3 - t2

        # Stage 3: unified fine cascade with shape-indexed features.
        for win, views in survivors2:
            crop = level.image[win.y:win.y + win.height, win.x:win.x + win.width]
            accepted, score, shape = _fine_verify(topo.fine_cascade, crop,
                                                  topo.mean_shape)
            if not accepted:
                continue
            inv = 1.0 / level.scale
            landmarks = [((win.x + u * (CANONICAL_WINDOW - 1)) * inv,
                          (win.y + v * (CANONICAL_WINDOW - 1)) * inv)
                         for u, v in shape.clamped().points]
            pre_nms.append(Detection(win.x * inv, win.y * inv,
                                     win.width * inv, win.height * inv,
                                     score, landmarks, views))
        t4 = time.perf_counter()
        stats.time_stage3 += t4 - t3
    stats.after_stage3 = len(pre_nms)

    t5 = time.perf_counter()
    detections = nms(pre_nms, params.nms_iou)
    stats.time_nms = time.perf_counter() - t5
    return detections, stats


def format_detection(det: Detection) -> str:
    """One text line: x y w h score and the 4 landmarks, views comma-joined."""
    coords = " ".join(f"{c:.6f}" for p in det.landmarks for c in p)
    views = ",".join(str(v) for v in sorted(det.views))
    return (f"{det.x:.6f} {det.y:.6f} {det.width:.6f} {det.height:.6f} "
            f"{det.score:.6f} {coords} {views}")


def detection_to_dict(det: Detection) -> dict:
    return {
        "x": det.x, "y": det.y, "w": det.width, "h": det.height,
        "score": det.score,
        "landmarks": [[x, y] for x, y in det.landmarks],
        "views": sorted(det.views),
    }


# --- serialization ---------------------------------------------------------

def _mlp_to_dict(m: MlpModel) -> dict:
    return {
        "layer_dims": list(m.layer_dims),
        "weights": [w.tolist() for w in m.weights],
        "biases": [b.tolist() for b in m.biases],
        "head": m.head,
    }


def _mlp_from_dict(d) -> MlpModel:
    try:
        return MlpModel(tuple(d["layer_dims"]),
                        [np.asarray(w, dtype=np.float64) for w in d["weights"]],
                        [np.asarray(b, dtype=np.float64) for b in d["biases"]],
                        d["head"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise ModelInvariantError(f"bad MLP record: {exc}") from exc


def _stage_to_dict(s: MlpStage) -> dict:
    return {
        "model": _mlp_to_dict(s.model),
        "feature_groups": list(s.feature_groups),
        "threshold": s.threshold,
    }


def _stage_from_dict(d) -> MlpStage:
    try:
        return MlpStage(_mlp_from_dict(d["model"]), list(d["feature_groups"]),
                        float(d["threshold"]))
    except (KeyError, TypeError) as exc:
        raise ModelInvariantError(f"bad MLP stage record: {exc}") from exc


def model_to_dict(model: FunnelModel) -> dict:
    """Canonical dict form of a model; key order is the file schema order."""
    return {
        "format": MODEL_FORMAT,
        "surf_pool_hash": model.pool_hash,
        "views": len(model.lab_cascades),
        "topology": {"view_to_branch": list(model.topology.view_to_branch)},
        "lab_cascades": [
            {
                "view_id": c.view_id,
                "threshold": c.threshold,
                "weak": [
                    {
                        "dx": wc.locator.dx,
                        "dy": wc.locator.dy,
                        "block_size_index": wc.locator.block_size_index,
                        "lut": wc.lut.tolist(),
                    }
                    for wc in c.weak
                ],
            }
            for c in model.lab_cascades
        ],
        "coarse_branches": [[_stage_to_dict(s) for s in branch]
                            for branch in model.topology.coarse_branches],
        "fine_cascade": [_stage_to_dict(s) for s in model.topology.fine_cascade],
        "mean_shape": model.topology.mean_shape.to_vector().tolist(),
        "metadata": model.metadata,
    }


def save_model(model: FunnelModel, path) -> None:
    text = json.dumps(model_to_dict(model), indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def load_model(path) -> FunnelModel:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"cannot parse model file {path}: {exc}") from exc
    if not isinstance(data, dict) or "format" not in data:
        raise ModelFormatError(f"{path} is not a model file")
    if data["format"] != MODEL_FORMAT:
        raise ModelVersionError(
            f"unsupported model format {data['format']!r}, expected {MODEL_FORMAT!r}")
    if data.get("surf_pool_hash") != surf_pool_hash():
        raise ModelHashError("model SURF pool hash does not match built-in pool")
    try:
        cascades = [
            LabCascadeModel(
                rec["view_id"],
                [LabWeakClassifier(
                    LabFeatureLocator(w["dx"], w["dy"], w["block_size_index"]),
                    np.asarray(w["lut"], dtype=np.float64))
                 for w in rec["weak"]],
                float(rec["threshold"]))
            for rec in data["lab_cascades"]
        ]
        topo = FunnelTopology(
            list(data["topology"]["view_to_branch"]),
            [[_stage_from_dict(s) for s in branch]
             for branch in data["coarse_branches"]],
            [_stage_from_dict(s) for s in data["fine_cascade"]],
            Shape4.from_vector(data["mean_shape"]),
        )
        model = FunnelModel(cascades, topo, data["surf_pool_hash"],
                            dict(data.get("metadata", {})))
    except ModelError:
        raise
    except Exception as exc:
        raise ModelInvariantError(f"invalid model structure: {exc}") from exc
    if data["views"] != len(model.lab_cascades):
        raise ModelInvariantError("declared view count disagrees with cascades")
    return model
