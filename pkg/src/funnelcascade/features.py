"""Descriptor families: LAB codes, SURF patch descriptors, SIFT at landmarks.

LAB codes compare a center block's pixel sum against its 8 neighbors in a
3x3 block grid, giving an 8-bit code readable with one array access from a
precomputed per-pixel map. SURF descriptors are 32-dim sign-split Haar
gradient statistics over a 2x2 cell grid. SIFT descriptors are upright
4x4x8 orientation histograms extracted at landmark positions, which makes
them shape-indexed when the landmarks come from a predicted shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import (
    CANONICAL_WINDOW,
    ConfigError,
    InputError,
    WindowRect,
    box_sum_grid,
    integral_image,
)

# 3x3 block neighborhood offsets in fixed bit order: NW,N,NE,W,E,SW,S,SE.
_NEIGHBOR_OFFSETS = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0),
                     (-1, 1), (0, 1), (1, 1)]

DEFAULT_BLOCK_SIZES = ((4, 4), (8, 8))

SURF_DIM = 32
SIFT_DIM = 128
SHAPE_POINTS = 4
SHAPE_DIM = 2 * SHAPE_POINTS
SHAPE_FEATURE_DIM = SHAPE_POINTS * SIFT_DIM


@dataclass(frozen=True)
class LabFeatureLocator:
    """LAB feature position inside the canonical window."""

    dx: int
    dy: int
    block_size_index: int

    def validate(self, block_sizes=DEFAULT_BLOCK_SIZES, window: int = CANONICAL_WINDOW):
        bw, bh = block_sizes[self.block_size_index]
        if self.dx < 0 or self.dy < 0 or self.dx + 3 * bw > window or self.dy + 3 * bh > window:
            raise InputError(f"locator {self} does not fit a {window}px window")


class LabFeatureMap:
    """Per-pixel LAB code rasters, one per block size; one lookup per feature."""

    def __init__(self, codes: list[np.ndarray], block_sizes):
        self.codes = codes
        self.block_sizes = tuple(tuple(b) for b in block_sizes)
        self.height, self.width = codes[0].shape

    def code_at(self, window: WindowRect, loc: LabFeatureLocator) -> int:
        return int(self.codes[loc.block_size_index][window.y + loc.dy, window.x + loc.dx])


def compute_lab_map(img: np.ndarray, block_sizes=DEFAULT_BLOCK_SIZES) -> LabFeatureMap:
    """Build LAB code rasters for an image.

    code(x, y) has bit k set iff the center block sum strictly exceeds the
    k-th neighbor block sum (order NW,N,NE,W,E,SW,S,SE) for the 3x3 block
    grid whose top-left block starts at (x, y). Border positions where the
    grid overflows carry code 0.
    """
    img = np.asarray(img)
    H, W = img.shape
    min_bw = min(b[0] for b in block_sizes)
    min_bh = min(b[1] for b in block_sizes)
    if W < 3 * min_bw or H < 3 * min_bh:
        raise InputError(f"image {W}x{H} smaller than smallest 3x3 block grid")
    ii = integral_image(img)
    codes = []
    for bw, bh in block_sizes:
        out = np.zeros((H, W), dtype=np.uint8)
        if W >= 3 * bw and H >= 3 * bh:
            sums = box_sum_grid(ii, bw, bh)  # (H-bh+1, W-bw+1)
            gh = H - 3 * bh + 1
            gw = W - 3 * bw + 1
            center = sums[bh:bh + gh, bw:bw + gw]
            code = np.zeros((gh, gw), dtype=np.uint8)
            for bit, (ox, oy) in enumerate(_NEIGHBOR_OFFSETS):
                nx = (ox + 1) * bw
                ny = (oy + 1) * bh
                neighbor = sums[ny:ny + gh, nx:nx + gw]
                code |= (center > neighbor).astype(np.uint8) << bit
            out[:gh, :gw] = code
        codes.append(out)
    return LabFeatureMap(codes, block_sizes)


def lab_code_at(lab_map: LabFeatureMap, window: WindowRect, loc: LabFeatureLocator) -> int:
    """Single-lookup LAB code for a locator inside a window."""
    return lab_map.code_at(window, loc)


def enumerate_locators(block_sizes=DEFAULT_BLOCK_SIZES, window: int = CANONICAL_WINDOW,
                       stride: int = 1) -> list[LabFeatureLocator]:
    """All locators whose 3x3 block grid fits the canonical window."""
    locs = []
    for idx, (bw, bh) in enumerate(block_sizes):
        for dy in range(0, window - 3 * bh + 1, stride):
            for dx in range(0, window - 3 * bw + 1, stride):
                locs.append(LabFeatureLocator(dx, dy, idx))
    return locs


@dataclass(frozen=True)
class SurfPatch:
    """Rectangular SURF patch inside the canonical window."""

    x: int
    y: int
    width: int
    height: int


def _axis_origins(side: int, window: int = CANONICAL_WINDOW, step: int = 16) -> list[int]:
    # Multiples of `step` within [0, window - side], plus the end-snapped origin.
    origins = list(range(0, window - side + 1, step))
    if window - side not in origins:
        origins.append(window - side)
    return origins


def default_surf_pool() -> list[SurfPatch]:
    """The 56-patch pool on the canonical window: step-16 origins with end snap.

    Squares of side 16/24/32/40 (18 patches) plus the eight 16/24/32/40
    rectangle shapes listed below (38 patches).
    """
    shapes = [(16, 16), (24, 24), (32, 32), (40, 40),
              (16, 24), (24, 16), (16, 32), (32, 16),
              (24, 32), (32, 24), (16, 40), (40, 16)]
    pool = []
    for w, h in shapes:
        for y in _axis_origins(h):
            for x in _axis_origins(w):
                pool.append(SurfPatch(x, y, w, h))
    return pool


def surf_descriptor(ii: np.ndarray, window: WindowRect, patch: SurfPatch) -> np.ndarray:
    """32-dim SURF descriptor of a patch inside a window, from the integral image.

    The patch splits into 2x2 cells. Haar responses at pixel (x, y) use a
    2x2 support: dx = right column minus left column, dy = bottom row minus
    top row. Each cell accumulates (sum dx, sum |dx|) split by the sign of
    dy and (sum dy, sum |dy|) split by the sign of dx, then the 32-vector
    is L2-normalized (zero vectors pass through).
    """
    if patch.width < 4 or patch.height < 4:
        raise ConfigError(f"degenerate SURF patch {patch}")
    px = window.x + patch.x
    py = window.y + patch.y
    H, W = ii.shape
    if px < 0 or py < 0 or px + patch.width > W or py + patch.height > H:
        raise InputError(f"patch {patch} of window {window} outside {W}x{H} image")

    pad = np.zeros((H + 1, W + 1), dtype=np.int64)
    pad[1:, 1:] = ii

    def rect(x, y, w, h):
        return pad[y + h, x + w] - pad[y + h, x] - pad[y, x + w] + pad[y, x]

    # Response grid: all (x, y) with a 2x2 support inside the patch.
    gx = np.arange(px, px + patch.width - 1)
    gy = np.arange(py, py + patch.height - 1)
    X, Y = np.meshgrid(gx, gy)
    dx = rect(X + 1, Y, 1, 2) - rect(X, Y, 1, 2)
    dy = rect(X, Y + 1, 2, 1) - rect(X, Y, 2, 1)

    desc = np.zeros(SURF_DIM)
    cw = (patch.width - 1) / 2
    ch = (patch.height - 1) / 2
    cell_x = np.minimum((np.arange(patch.width - 1) / cw).astype(int), 1)
    cell_y = np.minimum((np.arange(patch.height - 1) / ch).astype(int), 1)
    for cy in range(2):
        for cx in range(2):
            m = (cell_y[:, None] == cy) & (cell_x[None, :] == cx)
            cdx = dx[m].astype(np.float64)
            cdy = dy[m].astype(np.float64)
            pos = cdy >= 0
            base = 8 * (2 * cy + cx)
            desc[base + 0] = cdx[pos].sum()
            desc[base + 1] = np.abs(cdx[pos]).sum()
            desc[base + 2] = cdx[~pos].sum()
            desc[base + 3] = np.abs(cdx[~pos]).sum()
            posx = cdx >= 0
            desc[base + 4] = cdy[posx].sum()
            desc[base + 5] = np.abs(cdy[posx]).sum()
            desc[base + 6] = cdy[~posx].sum()
            desc[base + 7] = np.abs(cdy[~posx]).sum()
    norm = np.linalg.norm(desc)
    if norm > 0:
        desc /= norm
    return desc


def surf_group_features(ii: np.ndarray, window: WindowRect,
                        pool: list[SurfPatch], indices) -> np.ndarray:
    """Concatenated SURF descriptors for the selected pool patches."""
    return np.concatenate([surf_descriptor(ii, window, pool[i]) for i in indices])


@dataclass(frozen=True)
class Shape4:
    """Four landmarks (left eye, right eye, nose tip, mouth center) in [0,1]^2."""

    points: tuple  # ((u, v),) * 4

    def __post_init__(self):
        if len(self.points) != SHAPE_POINTS:
            raise InputError(f"expected {SHAPE_POINTS} landmarks, got {len(self.points)}")
        arr = np.asarray(self.points, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise InputError("landmarks must be finite")

    @classmethod
    def from_vector(cls, vec) -> "Shape4":
        vec = np.asarray(vec, dtype=np.float64).reshape(SHAPE_POINTS, 2)
        return cls(tuple(map(tuple, vec)))

    def to_vector(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).reshape(-1)

    def clamped(self) -> "Shape4":
        arr = np.clip(np.asarray(self.points, dtype=np.float64), 0.0, 1.0)
        return Shape4(tuple(map(tuple, arr)))


def sift_descriptor(img: np.ndarray, point, radius: int = 8) -> np.ndarray:
    """Upright 128-dim SIFT descriptor at a normalized point of a window raster.

    Gradients are central differences on the raster (zero outside it). The
    2r x 2r patch around the point is split into 4x4 spatial bins with 8
    orientation bins, bilinear spatial and linear orientation interpolation,
    Gaussian weighting with sigma = r, then L2-normalize, clip at 0.2 and
    renormalize.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    u, v = point
    u = min(max(float(u), 0.0), 1.0)
    v = min(max(float(v), 0.0), 1.0)
    cx = u * (W - 1)
    cy = v * (H - 1)

    # Gradients over the full raster, zero beyond the border.
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0

    x0 = int(np.floor(cx)) - radius + 1
    y0 = int(np.floor(cy)) - radius + 1
    xs = np.arange(x0, x0 + 2 * radius)
    ys = np.arange(y0, y0 + 2 * radius)
    X, Y = np.meshgrid(xs, ys)
    inside = (X >= 0) & (X < W) & (Y >= 0) & (Y < H)
    Xc = np.clip(X, 0, W - 1)
    Yc = np.clip(Y, 0, H - 1)
    mgx = np.where(inside, gx[Yc, Xc], 0.0)
    mgy = np.where(inside, gy[Yc, Xc], 0.0)

    mag = np.hypot(mgx, mgy)
    ori = np.arctan2(mgy, mgx) % (2 * np.pi)
    weight = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * radius ** 2))
    wmag = mag * weight

    # Continuous bin coordinates: 4 spatial bins per axis over the 2r patch.
    bx = (X - cx + radius) * (4.0 / (2 * radius)) - 0.5
    by = (Y - cy + radius) * (4.0 / (2 * radius)) - 0.5
    bo = ori * (8.0 / (2 * np.pi))

    hist = np.zeros((4, 4, 8))
    ix0 = np.floor(bx).astype(int)
    iy0 = np.floor(by).astype(int)
    io0 = np.floor(bo).astype(int)
    fx = bx - ix0
    fy = by - iy0
    fo = bo - io0
    for dyb in (0, 1):
        for dxb in (0, 1):
            for dob in (0, 1):
                w = wmag * (fy if dyb else 1 - fy) * (fx if dxb else 1 - fx) \
                    * (fo if dob else 1 - fo)
                yb = iy0 + dyb
                xb = ix0 + dxb
                ob = (io0 + dob) % 8
                m = (yb >= 0) & (yb < 4) & (xb >= 0) & (xb < 4) & (w > 0)
                np.add.at(hist, (yb[m], xb[m], ob[m]), w[m])

    desc = hist.reshape(-1)
    norm = np.linalg.norm(desc)
    if norm == 0:
        return desc
    desc = np.minimum(desc / norm, 0.2)
    norm = np.linalg.norm(desc)
    if norm > 0:
        desc = desc / norm
    return desc


def shape_indexed_features(img: np.ndarray, shape: Shape4, radius: int = 8) -> np.ndarray:
    """512-dim concatenation of SIFT descriptors at the 4 (clamped) landmarks."""
    clamped = shape.clamped()
    return np.concatenate([sift_descriptor(img, p, radius) for p in clamped.points])
