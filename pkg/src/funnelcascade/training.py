"""End-to-end training driver: manifests, view partitioning, augmentation,
hard-negative mining, and stage-wise funnel training."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .cascade import MlpStage, score_lab_grid, train_lab_stage, verify_mlp_stage
from .features import (
    Shape4,
    compute_lab_map,
    default_surf_pool,
    enumerate_locators,
    shape_indexed_features,
    surf_descriptor,
)
from .funnel import FunnelModel, FunnelTopology, surf_pool_hash
from .imaging import (
    CANONICAL_WINDOW,
    ConfigError,
    InputError,
    WindowRect,
    build_pyramid,
    integral_image,
    read_image,
    resize_bilinear,
    window_origin_grid,
)
from .neural import (
    TrainConfig,
    TrainingError,
    forward,
    select_feature_groups,
    train_joint_mlp,
    train_mlp,
)

FIVE_VIEW_BINS = (-90.0, -60.0, -20.0, 20.0, 60.0, 90.0)


@dataclass
class TrainSample:
    """One canonical 40x40 training window."""

    image: np.ndarray
    label: bool  # face / non-face
    yaw: float | None = None  # faces only, degrees in [-90, 90]
    shape: Shape4 | None = None  # faces only, optional
    source: str = ""

    def __post_init__(self):
        if self.image.shape != (CANONICAL_WINDOW, CANONICAL_WINDOW):
            raise InputError(f"sample raster must be 40x40, got {self.image.shape}")
        if self.label and self.yaw is None:
            raise InputError("face samples need a yaw label")


# --- manifests -------------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    rect: tuple | None = None  # (x, y, w, h) for positives
    yaw: float | None = None
    shape: Shape4 | None = None


@dataclass
class DatasetManifest:
    positives: list
    negatives: list  # paths of face-free images


def parse_manifest(path) -> DatasetManifest:
    """Read the line-oriented manifest: P <img> <x> <y> <w> <h> <yaw> [8 floats]
    for positives, N <img> for negatives, # for comments."""
    positives, negatives = [], []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "N":
                if len(parts) != 2:
                    raise InputError(f"{path}:{lineno}: N line needs exactly one path")
                negatives.append(os.path.join(base, parts[1]))
            elif kind == "P":
                if len(parts) not in (7, 15):
                    raise InputError(
                        f"{path}:{lineno}: P line needs rect+yaw and optionally 8 landmarks")
                rect = tuple(int(v) for v in parts[2:6])
                yaw = float(parts[6])
                if not -90 <= yaw <= 90:
                    raise InputError(f"{path}:{lineno}: yaw {yaw} outside [-90, 90]")
                shape = None
                if len(parts) == 15:
                    shape = Shape4.from_vector([float(v) for v in parts[7:]])
                positives.append(ManifestRecord(os.path.join(base, parts[1]),
                                                rect, yaw, shape))
            else:
                raise InputError(f"{path}:{lineno}: unknown record kind {kind!r}")
    return DatasetManifest(positives, negatives)


def load_training_data(manifest: DatasetManifest, allow_png: bool = False):
    """Crop manifest positives to canonical windows; load negative images."""
    samples = []
    for rec in manifest.positives:
        img = read_image(rec.path, allow_png)
        x, y, w, h = rec.rect
        if x < 0 or y < 0 or x + w > img.shape[1] or y + h > img.shape[0]:
            raise InputError(f"rect {rec.rect} outside {rec.path}")
        crop = img[y:y + h, x:x + w]
        if crop.shape != (CANONICAL_WINDOW, CANONICAL_WINDOW):
            crop = resize_bilinear(crop, CANONICAL_WINDOW, CANONICAL_WINDOW)
        samples.append(TrainSample(crop, True, rec.yaw, rec.shape, rec.path))
    negatives = [read_image(p, allow_png) for p in manifest.negatives]
    return samples, negatives


# --- view partitioning -----------------------------------------------------

def view_of_yaw(yaw: float, scheme: str = "five", custom_bins=None) -> int:
    if not -90 <= yaw <= 90:
        raise InputError(f"yaw {yaw} outside [-90, 90]")
    if scheme == "five":
        # Bins: [-90,-60), [-60,-20), [-20,20], (20,60], (60,90].
        if yaw < -60:
            return 0
        if yaw < -20:
            return 1
        if yaw <= 20:
            return 2
        return 3 if yaw <= 60 else 4
    elif scheme == "two":
        return 0 if abs(yaw) <= 30 else 1
    elif scheme == "custom":
        if custom_bins is None or len(custom_bins) < 2:
            raise ConfigError("custom scheme needs at least two bin edges")
        edges = tuple(custom_bins)
    else:
        raise ConfigError(f"unknown view scheme {scheme!r}")
    for i in range(len(edges) - 1):
        if edges[i] <= yaw < edges[i + 1]:
            return i
    return len(edges) - 2  # upper edge inclusive


def view_count(scheme: str = "five", custom_bins=None) -> int:
    if scheme == "five":
        return 5
    if scheme == "two":
        return 2
    return len(custom_bins) - 1


def partition_views(samples, scheme: str = "five", custom_bins=None) -> dict:
    """Per-view subsets of face samples; every sample lands in exactly one."""
    subsets: dict[int, list] = {v: [] for v in range(view_count(scheme, custom_bins))}
    for s in samples:
        subsets[view_of_yaw(s.yaw, scheme, custom_bins)].append(s)
    return subsets


# --- augmentation ----------------------------------------------------------

@dataclass
class AugmentBounds:
    rotation_deg: float = 15.0
    scale: float = 0.10
    translate: float = 0.05  # fraction of the window
    mirror: bool = True


@dataclass
class AffineParams:
    angle_deg: float
    scale: float
    tx: float  # normalized translation
    ty: float
    mirror: bool


def draw_affine(rng: np.random.Generator, bounds: AugmentBounds) -> AffineParams:
    return AffineParams(
        float(rng.uniform(-bounds.rotation_deg, bounds.rotation_deg)),
        float(1.0 + rng.uniform(-bounds.scale, bounds.scale)),
        float(rng.uniform(-bounds.translate, bounds.translate)),
        float(rng.uniform(-bounds.translate, bounds.translate)),
        bool(bounds.mirror and rng.integers(0, 2)),
    )


def _affine_matrix(params: AffineParams):
    """Forward map q' = A (q - c) + c + t in normalized coordinates."""
    rad = np.deg2rad(params.angle_deg)
    rot = np.array([[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]])
    mir = np.diag([-1.0, 1.0]) if params.mirror else np.eye(2)
    return params.scale * rot @ mir, np.array([params.tx, params.ty])


def transform_shape(shape: Shape4, params: AffineParams) -> Shape4:
    """Exact affine image of the landmarks; mirror swaps left/right eye."""
    a, t = _affine_matrix(params)
    pts = np.asarray(shape.points)
    out = (pts - 0.5) @ a.T + 0.5 + t
    if params.mirror:
        out = out[[1, 0, 2, 3]]
    return Shape4(tuple(map(tuple, out)))


def warp_sample(sample: TrainSample, params: AffineParams) -> TrainSample:
    """Apply an affine distortion to raster, landmarks, and yaw."""
    img = sample.image.astype(np.float64)
    n = CANONICAL_WINDOW
    a, t = _affine_matrix(params)
    inv = np.linalg.inv(a)
    xs = (np.arange(n) + 0.0) / (n - 1)
    gx, gy = np.meshgrid(xs, xs)
    q = np.stack([gx - 0.5 - t[0], gy - 0.5 - t[1]], axis=-1) @ inv.T + 0.5
    px = np.clip(q[..., 0] * (n - 1), 0, n - 1)
    py = np.clip(q[..., 1] * (n - 1), 0, n - 1)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = np.minimum(x0 + 1, n - 1)
    y1 = np.minimum(y0 + 1, n - 1)
    fx = px - x0
    fy = py - y0
    out = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
           + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    warped = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    shape = transform_shape(sample.shape, params) if sample.shape else None
    yaw = -sample.yaw if params.mirror and sample.yaw is not None else sample.yaw
    return TrainSample(warped, sample.label, yaw, shape, sample.source)


def augment(samples, factor: int = 3, bounds: AugmentBounds | None = None,
            seed: int = 0):
    """Original samples plus (factor - 1) distorted variants each."""
    if factor < 1:
        raise ConfigError("augmentation factor must be >= 1")
    bounds = bounds or AugmentBounds()
    rng = np.random.default_rng(seed)
    out = []
    for sample in samples:
        out.append(sample)
        for _ in range(factor - 1):
            out.append(warp_sample(sample, draw_affine(rng, bounds)))
    return out


def mean_shape(shapes) -> Shape4:
    """Coordinate-wise mean of normalized shapes."""
    shapes = list(shapes)
    if not shapes:
        raise TrainingError("mean shape needs at least one annotated face")
    return Shape4.from_vector(np.mean([s.to_vector() for s in shapes], axis=0))


# --- hard-negative mining --------------------------------------------------

def mine_hard_negatives(scan_fn, negative_images, n: int, seed: int = 0):
    """Windows of the negative images that pass the current model prefix.

    scan_fn(image) must return the passing 40x40 crops. Returns (crops,
    exhausted): uniformly subsampled to n, or everything with exhausted=True
    when fewer exist.
    """
    if not negative_images:
        raise InputError("empty negative image pool")
    crops = []
    for img in negative_images:
        crops.extend(scan_fn(img))
    if len(crops) <= n:
        return crops, True
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(crops), size=n, replace=False)
    return [crops[i] for i in sorted(idx)], False


def scan_lab_prefix(img, lab_cascades, stride: int = 2, scale_factor: float = 1.25,
                    coarse_branches=None, view_to_branch=None):
    """Crops passing the per-view LAB union (and the coarse branches if given)."""
    crops = []
    for level in build_pyramid(img, scale_factor, CANONICAL_WINDOW):
        lh, lw = level.image.shape
        xs, ys = window_origin_grid(lw, lh, stride=stride)
        if len(xs) == 0 or len(ys) == 0:
            continue
        lab_map = compute_lab_map(level.image)
        accept = {}
        for c in lab_cascades:
            scores = score_lab_grid(c, lab_map, xs, ys)
            for j, i in zip(*np.nonzero(scores >= c.threshold)):
                accept.setdefault((int(xs[i]), int(ys[j])), set()).add(c.view_id)
        ii = integral_image(level.image) if coarse_branches else None
        pool = default_surf_pool() if coarse_branches else None
        for (x, y), views in sorted(accept.items()):
            if coarse_branches is not None:
                win = WindowRect(x, y, CANONICAL_WINDOW, CANONICAL_WINDOW)
                branches = {view_to_branch[v] for v in views}
                ok = False
                for b in sorted(branches):
                    passed = True
                    for stage in coarse_branches[b]:
                        feats = np.concatenate(
                            [surf_descriptor(ii, win, pool[g])
                             for g in stage.feature_groups])
                        acc, _, _ = verify_mlp_stage(stage, feats)
                        if not acc:
                            passed = False
                            break
                    if passed:
                        ok = True
                        break
                if not ok:
                    continue
            crops.append(level.image[y:y + CANONICAL_WINDOW, x:x + CANONICAL_WINDOW].copy())
    return crops


def random_crops(negative_images, n: int, seed: int = 0):
    """Uniform 40x40 crops from the negative pool."""
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(n):
        img = negative_images[int(rng.integers(0, len(negative_images)))]
        h, w = img.shape
        if h < CANONICAL_WINDOW or w < CANONICAL_WINDOW:
            continue
        x = int(rng.integers(0, w - CANONICAL_WINDOW + 1))
        y = int(rng.integers(0, h - CANONICAL_WINDOW + 1))
        crops.append(img[y:y + CANONICAL_WINDOW, x:x + CANONICAL_WINDOW].copy())
    return crops


# --- the full driver -------------------------------------------------------

@dataclass
class FunnelTrainConfig:
    seed: int = 0
    scheme: str = "five"
    custom_bins: tuple | None = None
    branch_layout: str = "funnel"  # "parallel": one coarse branch per view
    augment_factor: int = 3
    bounds: AugmentBounds = field(default_factory=AugmentBounds)
    validation_fraction: float = 0.1
    n_weak: int = 150
    locator_stride: int = 2
    lab_target_recall: float = 0.95
    neg_ratio: float = 3.0
    mining_stride: int = 2
    scale_factor: float = 1.25
    coarse_groups: tuple = (2, 4, 6)
    coarse_hidden: tuple = (15, 20, 20)
    coarse_target_recall: float = 0.99
    coarse_epochs: int = 150
    fine_stages: int = 2
    fine_hidden: int = 80
    fine_target_recall: float = 0.99
    fine_epochs: int = 200
    learning_rate: float = 1.0
    batch_size: int = 64
    lam: float = 0.125


@dataclass
class StageReport:
    name: str
    recall: float
    rejection: float
    survivors: int
    threshold: float


@dataclass
class TrainingReport:
    stages: list = field(default_factory=list)

    def add(self, name, recall, rejection, survivors, threshold):
        self.stages.append(StageReport(name, recall, rejection, survivors, threshold))

    def format(self) -> str:
        lines = ["stage  recall  rejection  survivors  threshold"]
        for s in self.stages:
            lines.append(f"{s.name}  {s.recall:.4f}  {s.rejection:.4f}  "
                         f"{s.survivors}  {s.threshold:.6f}")
        return "\n".join(lines)


def default_view_to_branch(scheme: str, custom_bins=None) -> list:
    """Frontal plus both half profiles share one coarse branch; each full
    profile gets its own. Other schemes verify one branch per view."""
    if scheme == "five":
        return [1, 0, 0, 0, 2]
    return list(range(view_count(scheme, custom_bins)))


def _surf_features_all(rasters):
    """Full 56-group SURF feature matrix (n, 56*32) for canonical rasters."""
    pool = default_surf_pool()
    win = WindowRect(0, 0, CANONICAL_WINDOW, CANONICAL_WINDOW)
    out = np.empty((len(rasters), len(pool) * 32))
    for i, raster in enumerate(rasters):
        ii = integral_image(raster)
        out[i] = np.concatenate([surf_descriptor(ii, win, p) for p in pool])
    return out


def _sift_features_all(rasters, shapes):
    out = np.empty((len(rasters), 512))
    for i, (raster, shape) in enumerate(zip(rasters, shapes)):
        out[i] = shape_indexed_features(raster, shape)
    return out


def _calibrate_threshold(scores, target_recall: float) -> float:
    """Largest threshold retaining at least target_recall of the scores."""
    srt = np.sort(np.asarray(scores))[::-1]
    keep = min(len(srt), int(np.ceil(target_recall * len(srt))))
    return float(srt[max(keep - 1, 0)])


def train_funnel(positives, negative_images, cfg: FunnelTrainConfig | None = None):
    """Train the complete funnel; returns (FunnelModel, TrainingReport).

    positives: face TrainSamples with yaw (shape annotations required for a
    two-stage fine cascade; without any, a single mean-shape stage is
    trained). negative_images: face-free grayscale rasters.
    """
    cfg = cfg or FunnelTrainConfig()
    if not positives or not negative_images:
        raise TrainingError("need positive samples and negative images")
    rng = np.random.default_rng(cfg.seed)
    report = TrainingReport()
    n_views = view_count(cfg.scheme, cfg.custom_bins)
    if cfg.branch_layout == "funnel":
        view_to_branch = default_view_to_branch(cfg.scheme, cfg.custom_bins)
    elif cfg.branch_layout == "parallel":
        view_to_branch = list(range(n_views))
    else:
        raise ConfigError(f"unknown branch layout {cfg.branch_layout!r}")
    n_branches = max(view_to_branch) + 1

    # Held-out split per view for threshold calibration and the report.
    by_view = partition_views(positives, cfg.scheme, cfg.custom_bins)
    train_pos, val_pos = [], []
    for v in range(n_views):
        subset = by_view[v]
        n_val = int(len(subset) * cfg.validation_fraction)
        perm = rng.permutation(len(subset))
        val_pos.extend(subset[i] for i in perm[:n_val])
        train_pos.extend(subset[i] for i in perm[n_val:])
    if not train_pos:
        raise TrainingError("no training positives after the validation split")

    aug = augment(train_pos, cfg.augment_factor, cfg.bounds, cfg.seed + 1)
    aug_by_view = partition_views(aug, cfg.scheme, cfg.custom_bins)

    # Stage 1: one boosted LAB cascade per view.
    locators = enumerate_locators(stride=cfg.locator_stride)
    lab_cascades = []
    for v in range(n_views):
        view_samples = aug_by_view[v]
        if not view_samples:
            raise TrainingError(f"stage lab[view={v}]: no training samples")
        pos_maps = [compute_lab_map(s.image) for s in view_samples]
        negs = random_crops(negative_images,
                            int(cfg.neg_ratio * len(view_samples)),
                            cfg.seed + 100 + v)
        if not negs:
            raise TrainingError(f"stage lab[view={v}]: no negative crops")
        neg_maps = [compute_lab_map(c) for c in negs]
        lab_cascades.append(train_lab_stage(
            pos_maps, neg_maps, view_id=v, n_weak=cfg.n_weak,
            target_recall=cfg.lab_target_recall, locators=locators,
            seed=cfg.seed + 200 + v))

    # Stage-1 report on held-out data.
    origin = WindowRect(0, 0, CANONICAL_WINDOW, CANONICAL_WINDOW)

    def union_accepts(raster):
        m = compute_lab_map(raster)
        return any(score_lab_grid(c, m, np.array([0]), np.array([0]))[0, 0]
                   >= c.threshold for c in lab_cascades)

    val_recall = (np.mean([union_accepts(s.image) for s in val_pos])
                  if val_pos else float("nan"))
    total_windows = surviving = 0
    for img in negative_images:
        for level in build_pyramid(img, cfg.scale_factor, CANONICAL_WINDOW):
            lh, lw = level.image.shape
            xs, ys = window_origin_grid(lw, lh, stride=cfg.mining_stride)
            if len(xs) == 0 or len(ys) == 0:
                continue
            total_windows += len(xs) * len(ys)
            lab_map = compute_lab_map(level.image)
            alive = np.zeros((len(ys), len(xs)), dtype=bool)
            for c in lab_cascades:
                alive |= score_lab_grid(c, lab_map, xs, ys) >= c.threshold
            surviving += int(alive.sum())
    rejection = 1.0 - surviving / total_windows if total_windows else 0.0
    report.add("lab-union", float(val_recall), rejection, surviving, 0.0)
    if val_pos and val_recall < cfg.lab_target_recall - 0.05:
        raise TrainingError(
            f"stage lab-union: validation recall {val_recall:.4f} below target")

    # Mined negatives for the coarse stages.
    def lab_scan(img):
        return scan_lab_prefix(img, lab_cascades, cfg.mining_stride,
                               cfg.scale_factor)

    n_neg_coarse = int(cfg.neg_ratio * len(aug))
    mined, _ = mine_hard_negatives(lab_scan, negative_images, n_neg_coarse,
                                   cfg.seed + 300)
    if len(mined) < 20:
        mined = mined + random_crops(negative_images, 20 - len(mined) + 20,
                                     cfg.seed + 301)

    # Stage 2: coarse SURF-MLP branches.
    branch_views = [[v for v, b in enumerate(view_to_branch) if b == bi]
                    for bi in range(n_branches)]
    neg_feats_full = _surf_features_all(mined)
    coarse_branches = []
    for bi, views in enumerate(branch_views):
        pos_b = [s for v in views for s in aug_by_view[v]]
        val_b = [s for s in val_pos
                 if view_of_yaw(s.yaw, cfg.scheme, cfg.custom_bins) in views]
        if not pos_b:
            raise TrainingError(f"stage coarse[branch={bi}]: no positives")
        pos_feats_full = _surf_features_all([s.image for s in pos_b])
        val_feats_full = _surf_features_all([s.image for s in val_b])
        negs = neg_feats_full
        stages = []
        for si, (k, hidden) in enumerate(zip(cfg.coarse_groups, cfg.coarse_hidden)):
            if len(negs) < 2:
                negs = np.concatenate([
                    negs, _surf_features_all(random_crops(
                        negative_images, 20, cfg.seed + 400 + 10 * bi + si))])
            x_full = np.concatenate([pos_feats_full, negs])
            y = np.concatenate([np.ones(len(pos_feats_full)), np.zeros(len(negs))])
            groups = select_feature_groups(x_full, y, k, seed=cfg.seed)
            cols = np.concatenate([np.arange(32 * g, 32 * (g + 1)) for g in groups])
            mlp = train_mlp(x_full[:, cols], y, (32 * k, hidden, 1),
                            TrainConfig(learning_rate=cfg.learning_rate,
                                        epochs=cfg.coarse_epochs,
                                        batch_size=cfg.batch_size,
                                        seed=cfg.seed + 500 + 10 * bi + si))
            cal_feats = (val_feats_full if len(val_feats_full)
                         else pos_feats_full)[:, cols]
            scores = forward(mlp, cal_feats)[:, 0]
            thr = _calibrate_threshold(scores, cfg.coarse_target_recall)
            stage = MlpStage(mlp, list(groups), thr)
            stages.append(stage)
            neg_scores = forward(mlp, negs[:, cols])[:, 0]
            alive = neg_scores >= thr
            rej = 1.0 - alive.mean() if len(alive) else 0.0
            recall = float((scores >= thr).mean())
            report.add(f"coarse[{bi}][{si}]", recall, float(rej),
                       int(alive.sum()), thr)
            if recall < cfg.coarse_target_recall - 1e-9:
                raise TrainingError(
                    f"stage coarse[{bi}][{si}]: recall {recall:.4f} below target")
            negs = negs[alive]
        coarse_branches.append(stages)

    # Stage 3: unified fine cascade with shape-indexed features.
    annotated = [s for s in aug if s.shape is not None]
    mshape = (mean_shape([s.shape for s in annotated]) if annotated
              else Shape4(((0.32, 0.42), (0.68, 0.42), (0.5, 0.62), (0.5, 0.8))))
    n_fine_stages = cfg.fine_stages if annotated else 1

    def coarse_scan(img):
        return scan_lab_prefix(img, lab_cascades, cfg.mining_stride,
                               cfg.scale_factor, coarse_branches, view_to_branch)

    mined_fine, _ = mine_hard_negatives(coarse_scan, negative_images,
                                        n_neg_coarse, cfg.seed + 600)
    if len(mined_fine) < 20:
        mined_fine = mined_fine + random_crops(negative_images, 40,
                                               cfg.seed + 601)

    pos_rasters = [s.image for s in aug]
    pos_targets = np.stack([(s.shape or mshape).to_vector() for s in aug])
    val_rasters = [s.image for s in val_pos]
    fine_stages = []
    pos_shapes = [mshape] * len(pos_rasters)
    neg_shapes = [mshape] * len(mined_fine)
    val_shapes = [mshape] * len(val_rasters)
    for si in range(n_fine_stages):
        x = np.concatenate([_sift_features_all(pos_rasters, pos_shapes),
                            _sift_features_all(mined_fine, neg_shapes)])
        y = np.concatenate([np.ones(len(pos_rasters)), np.zeros(len(mined_fine))])
        shapes = np.concatenate([pos_targets, np.zeros((len(mined_fine), 8))])
        mlp = train_joint_mlp(x, y, shapes, (512, cfg.fine_hidden, 9),
                              TrainConfig(learning_rate=cfg.learning_rate,
                                          epochs=cfg.fine_epochs,
                                          batch_size=cfg.batch_size,
                                          lam=cfg.lam,
                                          seed=cfg.seed + 700 + si))
        val_x = _sift_features_all(val_rasters, val_shapes)
        cal = forward(mlp, val_x)[:, 0] if len(val_rasters) else forward(mlp, x[y == 1])[:, 0]
        thr = _calibrate_threshold(cal, cfg.fine_target_recall)
        fine_stages.append(MlpStage(mlp, [], thr))

        neg_out = forward(mlp, x[y == 0]) if len(mined_fine) else np.zeros((0, 9))
        alive = neg_out[:, 0] >= thr if len(neg_out) else np.zeros(0, dtype=bool)
        recall = float((cal >= thr).mean())
        report.add(f"fine[{si}]", recall, float(1.0 - alive.mean()) if len(alive) else 0.0,
                   int(alive.sum()), thr)
        if recall < cfg.fine_target_recall - 1e-9:
            raise TrainingError(f"stage fine[{si}]: recall {recall:.4f} below target")
        if si + 1 < n_fine_stages:
            # Refined shapes feed the next stage's feature extraction.
            pos_shapes = [Shape4.from_vector(o[1:])
                          for o in forward(mlp, x[y == 1])]
            keep = [i for i, a in enumerate(alive) if a]
            mined_fine = [mined_fine[i] for i in keep]
            neg_shapes = [Shape4.from_vector(neg_out[i, 1:]) for i in keep]
            if len(mined_fine) < 10:
                extra = random_crops(negative_images, 40, cfg.seed + 800 + si)
                mined_fine = mined_fine + extra
                neg_shapes = neg_shapes + [mshape] * len(extra)
            val_shapes = [Shape4.from_vector(o[1:]) for o in forward(mlp, val_x)] \
                if len(val_rasters) else val_shapes

    topo = FunnelTopology(view_to_branch, coarse_branches, fine_stages, mshape)
    metadata = {
        "seed": cfg.seed,
        "scheme": cfg.scheme,
        "positives": len(positives),
        "augment_factor": cfg.augment_factor,
        "n_weak": cfg.n_weak,
        "lam": cfg.lam,
    }
    model = FunnelModel(lab_cascades, topo, surf_pool_hash(), metadata)
    return model, report
