"""Procedural face-like renderings with known landmarks and yaw, plus
texture negatives. Desk-scale stand-in for real training corpora."""

from __future__ import annotations

import numpy as np

from .features import Shape4
from .imaging import CANONICAL_WINDOW, resize_bilinear

# Frontal landmark layout in normalized window coordinates.
FRONTAL_LANDMARKS = np.array([
    [0.32, 0.42],  # left eye center
    [0.68, 0.42],  # right eye center
    [0.50, 0.62],  # nose tip
    [0.50, 0.80],  # mouth center
])


def yaw_landmarks(yaw_deg: float) -> np.ndarray:
    """Landmark positions for a yaw angle; full-profile eyes coincide."""
    rad = np.deg2rad(yaw_deg)
    pts = FRONTAL_LANDMARKS.copy()
    # Features compress horizontally and drift toward the visible side.
    pts[:, 0] = 0.5 + (pts[:, 0] - 0.5) * np.cos(rad) + 0.18 * np.sin(rad)
    if yaw_deg > 60:
        pts[0, 0] = pts[1, 0]  # left eye hidden behind the face
        pts[0, 1] = pts[1, 1]
    elif yaw_deg < -60:
        pts[1, 0] = pts[0, 0]
        pts[1, 1] = pts[0, 1]
    return pts


def _disk(img, cx, cy, r, value):
    h, w = img.shape
    ys, xs = np.ogrid[:h, :w]
    mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    img[mask] = value


def render_face(rng: np.random.Generator, yaw_deg: float,
                size: int = CANONICAL_WINDOW):
    """One face-like sample; returns (uint8 raster, Shape4, yaw)."""
    rad = np.deg2rad(yaw_deg)
    base = rng.integers(20, 60)
    img = (base + rng.normal(0, 8, size=(size, size))).clip(0, 255)

    # Head: bright ellipse, narrowed and shifted with yaw.
    face_tone = rng.integers(150, 220)
    cx = size * (0.5 + 0.10 * np.sin(rad))
    cy = size * 0.52
    ax = size * 0.36 * (0.65 + 0.35 * abs(np.cos(rad)))
    ay = size * 0.44
    ys, xs = np.ogrid[:size, :size]
    head = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    img[head] = face_tone + rng.normal(0, 5, size=int(head.sum()))

    pts = yaw_landmarks(yaw_deg)
    px = pts[:, 0] * (size - 1)
    py = pts[:, 1] * (size - 1)
    dark = max(10, face_tone - rng.integers(90, 130))
    _disk(img, px[0], py[0], size * 0.055, dark)   # eyes
    _disk(img, px[1], py[1], size * 0.055, dark)
    _disk(img, px[2], py[2], size * 0.045, face_tone - 40)  # nose
    # Mouth: dark horizontal bar.
    mw = size * 0.14 * (0.6 + 0.4 * abs(np.cos(rad)))
    mh = size * 0.035
    mouth = (np.abs(xs - px[3]) <= mw) & (np.abs(ys - py[3]) <= mh)
    img[mouth] = dark + 15

    img = img + rng.normal(0, 4, size=img.shape)
    return img.clip(0, 255).astype(np.uint8), Shape4(tuple(map(tuple, pts))), yaw_deg


def random_yaw(rng: np.random.Generator) -> float:
    """Yaw spread over the five-view bins with a frontal bias."""
    bucket = rng.integers(0, 5)
    lo, hi = [(-90, -60), (-60, -20), (-20, 20), (20, 60), (60, 90)][bucket]
    return float(rng.uniform(lo, hi))


def negative_texture(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Face-free texture image: noise, gradients, stripes, or soft blobs."""
    kind = rng.integers(0, 4)
    if kind == 0:
        img = rng.integers(0, 256, size=(height, width)).astype(np.float64)
    elif kind == 1:
        gx = np.linspace(0, rng.uniform(80, 255), width)
        gy = np.linspace(0, rng.uniform(80, 255), height)[:, None]
        img = gx + gy + rng.normal(0, 10, size=(height, width))
    elif kind == 2:
        period = rng.integers(4, 16)
        ys, xs = np.ogrid[:height, :width]
        angle = rng.uniform(0, np.pi)
        phase = xs * np.cos(angle) + ys * np.sin(angle)
        img = 128 + 100 * np.sin(2 * np.pi * phase / period)
        img = img + rng.normal(0, 12, size=img.shape)
    else:
        small = rng.integers(0, 256, size=(max(2, height // 12), max(2, width // 12)))
        img = resize_bilinear(small.astype(np.uint8), width, height).astype(np.float64)
        img = img + rng.normal(0, 6, size=img.shape)
    return img.clip(0, 255).astype(np.uint8)


def face_scene(rng: np.random.Generator, width: int = 120, height: int = 120,
               face_size: int = 60, yaw_deg: float | None = None):
    """A texture scene with one rendered face pasted at a random position.

    Returns (image, face rect (x, y, w, h), Shape4 in rect coordinates, yaw).
    """
    yaw = random_yaw(rng) if yaw_deg is None else yaw_deg
    scene = negative_texture(rng, width, height).copy()
    face, shape, _ = render_face(rng, yaw)
    if face_size != CANONICAL_WINDOW:
        face = resize_bilinear(face, face_size, face_size)
    x = int(rng.integers(0, width - face_size + 1))
    y = int(rng.integers(0, height - face_size + 1))
    scene[y:y + face_size, x:x + face_size] = face
    return scene, (x, y, face_size, face_size), shape, yaw


def face_set(n: int, seed: int = 0):
    """n rendered faces: lists of rasters, shapes, yaws."""
    rng = np.random.default_rng(seed)
    rasters, shapes, yaws = [], [], []
    for _ in range(n):
        img, shape, yaw = render_face(rng, random_yaw(rng))
        rasters.append(img)
        shapes.append(shape)
        yaws.append(yaw)
    return rasters, shapes, yaws


def negative_set(n: int, width: int = 100, height: int = 100, seed: int = 1):
    rng = np.random.default_rng(seed)
    return [negative_texture(rng, width, height) for _ in range(n)]
