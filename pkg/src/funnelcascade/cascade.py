"""Stage classifiers: Real-AdaBoost LAB cascades with LUT weak learners,
union proposal across views, and threshold-gated MLP verification stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import (
    LabFeatureLocator,
    LabFeatureMap,
    Shape4,
    enumerate_locators,
    lab_code_at,
)
from .imaging import WindowRect
from .neural import MlpModel, TrainingError, forward


@dataclass
class LabWeakClassifier:
    """One LAB feature with a 256-entry real-valued lookup table."""

    locator: LabFeatureLocator
    lut: np.ndarray  # (256,) float

    def __post_init__(self):
        self.lut = np.asarray(self.lut, dtype=np.float64)
        if self.lut.shape != (256,) or not np.isfinite(self.lut).all():
            raise TrainingError("weak classifier LUT must be 256 finite reals")


@dataclass
class LabCascadeModel:
    """Boosted stage for one view: sum of LUT outputs against a threshold."""

    view_id: int
    weak: list
    threshold: float

    def __post_init__(self):
        if not self.weak:
            raise TrainingError("LAB cascade needs at least one weak classifier")


def _sample_codes(lab_maps, locators):
    """Codes of every sample at every locator; shape (n_samples, n_locators)."""
    n = len(lab_maps)
    n_sizes = max(loc.block_size_index for loc in locators) + 1
    stacks = [np.stack([m.codes[bi] for m in lab_maps]) for bi in range(n_sizes)]
    codes = np.empty((n, len(locators)), dtype=np.int32)
    for j, loc in enumerate(locators):
        codes[:, j] = stacks[loc.block_size_index][:, loc.dy, loc.dx]
    return codes


def train_lab_stage(pos_maps, neg_maps, view_id: int = 0, n_weak: int = 150,
                    target_recall: float = 0.995, locators=None,
                    calibration_fraction: float = 0.1,
                    seed: int = 0) -> LabCascadeModel:
    """Real AdaBoost over LAB LUT weak learners on canonical-window samples.

    Each round picks the locator minimizing Z = 2 * sum_c sqrt(W+(c) W-(c))
    over the 256 codes; the weak output is h(c) = 0.5 * ln((W+(c)+eps) /
    (W-(c)+eps)) with eps = 1/(4N). The stage threshold is the largest value
    retaining at least target_recall on a held-out positive split.
    """
    if not pos_maps or not neg_maps:
        raise TrainingError("need non-empty positive and negative sample sets")
    rng = np.random.default_rng(seed)
    n_cal = max(1, int(len(pos_maps) * calibration_fraction)) if len(pos_maps) > 4 else 0
    perm = rng.permutation(len(pos_maps))
    cal_idx = set(perm[:n_cal].tolist())
    train_pos = [m for i, m in enumerate(pos_maps) if i not in cal_idx]
    cal_pos = [pos_maps[i] for i in sorted(cal_idx)]
    if not train_pos:
        train_pos, cal_pos = pos_maps, []

    locators = locators or enumerate_locators()
    codes_pos = _sample_codes(train_pos, locators)
    codes_neg = _sample_codes(neg_maps, locators)
    n_pos, n_loc = codes_pos.shape
    n_neg = len(codes_neg)
    n_total = n_pos + n_neg
    eps = 1.0 / (4.0 * n_total)

    w_pos = np.full(n_pos, 1.0 / n_total)
    w_neg = np.full(n_neg, 1.0 / n_total)
    loc_idx = np.broadcast_to(np.arange(n_loc), (max(n_pos, n_neg), n_loc))

    weak: list[LabWeakClassifier] = []
    score_pos = np.zeros(n_pos)
    score_neg = np.zeros(n_neg)
    minlength = 256 * n_loc
    for _ in range(n_weak):
        hp = np.bincount((codes_pos + 256 * loc_idx[:n_pos]).ravel(),
                         weights=np.repeat(w_pos, n_loc),
                         minlength=minlength).reshape(n_loc, 256)
        hn = np.bincount((codes_neg + 256 * loc_idx[:n_neg]).ravel(),
                         weights=np.repeat(w_neg, n_loc),
                         minlength=minlength).reshape(n_loc, 256)
        z = 2.0 * np.sqrt(hp * hn).sum(axis=1)
        best = int(z.argmin())
        lut = 0.5 * np.log((hp[best] + eps) / (hn[best] + eps))
        weak.append(LabWeakClassifier(locators[best], lut))

        out_pos = lut[codes_pos[:, best]]
        out_neg = lut[codes_neg[:, best]]
        score_pos += out_pos
        score_neg += out_neg
        w_pos *= np.exp(-out_pos)
        w_neg *= np.exp(out_neg)
        total = w_pos.sum() + w_neg.sum()
        w_pos /= total
        w_neg /= total

    if cal_pos:
        cal_codes = _sample_codes(cal_pos, locators)
        cal_scores = np.zeros(len(cal_pos))
        for j, wc in enumerate(weak):
            li = locators.index(wc.locator)
            cal_scores += wc.lut[cal_codes[:, li]]
    else:
        cal_scores = score_pos
    # Largest threshold keeping >= target_recall of the calibration positives.
    # A split too small to resolve the target degenerates to the minimum score,
    # which a single outlier can drag arbitrarily low; fall back to the quantile
    # over all positive scores in that case.
    if len(cal_scores) * (1.0 - target_recall) < 1.0:
        cal_scores = np.concatenate([score_pos, cal_scores])
    srt = np.sort(cal_scores)[::-1]
    keep = min(len(srt), int(np.ceil(target_recall * len(srt))))
    threshold = float(srt[max(keep - 1, 0)])
    return LabCascadeModel(view_id, weak, threshold)


def classify_lab(model: LabCascadeModel, lab_map: LabFeatureMap,
                 window: WindowRect) -> tuple[bool, float]:
    """Accept iff the summed LUT outputs reach the stage threshold."""
    score = 0.0
    for wc in model.weak:
        score += wc.lut[lab_code_at(lab_map, window, wc.locator)]
    return score >= model.threshold, score


def score_lab_grid(model: LabCascadeModel, lab_map: LabFeatureMap,
                   xs: np.ndarray, ys: np.ndarray,
                   chunk: int = 25) -> np.ndarray:
    """Vectorized stage scores for a grid of window origins (len(ys), len(xs)).

    Weak classifiers are evaluated in chunks with an early exit: positions
    whose partial score plus the maximum attainable remainder cannot reach
    the threshold are frozen. Decisions are identical to the full sum.
    """
    scores = np.zeros((len(ys), len(xs)))
    alive = np.ones_like(scores, dtype=bool)
    max_rest = np.cumsum([wc.lut.max() for wc in model.weak][::-1])[::-1]
    for start in range(0, len(model.weak), chunk):
        block = model.weak[start:start + chunk]
        ay, ax = np.nonzero(alive)
        if len(ay) == 0:
            break
        part = np.zeros(len(ay))
        for wc in block:
            raster = lab_map.codes[wc.locator.block_size_index]
            part += wc.lut[raster[ys[ay] + wc.locator.dy, xs[ax] + wc.locator.dx]]
        scores[ay, ax] += part
        nxt = start + len(block)
        if nxt < len(model.weak):
            bound = scores[ay, ax] + max_rest[nxt]
            dead = bound < model.threshold
            alive[ay[dead], ax[dead]] = False
    return scores


def union_propose(cascades, lab_map: LabFeatureMap, windows):
    """Survivors of the per-view OR, each tagged with its accepting views.

    Returns a list of (window, accepting_view_ids) preserving window order;
    a window survives iff at least one view cascade accepts it.
    """
    survivors = []
    seen = set()
    for win in windows:
        key = (win.x, win.y)
        if key in seen:
            continue
        seen.add(key)
        views = frozenset(c.view_id for c in cascades
                          if classify_lab(c, lab_map, win)[0])
        if views:
            survivors.append((win, views))
    return survivors


@dataclass
class MlpStage:
    """Threshold-gated MLP verification stage."""

    model: MlpModel
    feature_groups: list = field(default_factory=list)  # SURF pool indices (coarse only)
    threshold: float = 0.5

    def __post_init__(self):
        if self.feature_groups:
            expected = 32 * len(self.feature_groups)
            if self.model.layer_dims[0] != expected:
                raise TrainingError(
                    f"stage input dim {self.model.layer_dims[0]} != 32 x "
                    f"{len(self.feature_groups)} selected groups")


def verify_mlp_stage(stage: MlpStage, features: np.ndarray):
    """(accept, class score, refined shape or None) for one feature vector."""
    out = forward(stage.model, features)
    score = float(out[0])
    accept = score >= stage.threshold
    if stage.model.head == "joint":
        return accept, score, Shape4.from_vector(out[1:])
    return accept, score, None
