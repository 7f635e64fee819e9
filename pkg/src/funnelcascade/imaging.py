"""Raster primitives: grayscale conversion, integral images, pyramids, window grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CANONICAL_WINDOW = 40


class InputError(ValueError):
    """Invalid input data (dimension mismatch, out-of-bounds access)."""


class ConfigError(ValueError):
    """Parameter outside its documented range."""


@dataclass(frozen=True)
class WindowRect:
    """Candidate window in pyramid-level coordinates (square, canonical size)."""

    x: int
    y: int
    width: int
    height: int
    scale_index: int = 0


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) uint8 RGB raster to 8-bit luminance (ITU-R 601 weights)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) RGB array, got shape {rgb.shape}")
    lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(lum), 0, 255).astype(np.uint8)


def integral_image(img: np.ndarray) -> np.ndarray:
    """Summed-area table: table[y, x] = sum of img[:y+1, :x+1], exact int64."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise InputError(f"expected non-empty 2-d grayscale array, got shape {img.shape}")
    return img.astype(np.int64).cumsum(axis=0).cumsum(axis=1)


def box_sum(ii: np.ndarray, x: int, y: int, w: int, h: int) -> int:
    """Sum of pixels in the w*h rectangle at (x, y) using 4 table reads."""
    H, W = ii.shape
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise InputError(f"rect ({x},{y},{w},{h}) outside {W}x{H} image")
    total = ii[y + h - 1, x + w - 1]
    if x > 0:
        total = total - ii[y + h - 1, x - 1]
    if y > 0:
        total = total - ii[y - 1, x + w - 1]
    if x > 0 and y > 0:
        total = total + ii[y - 1, x - 1]
    return int(total)


def box_sum_grid(ii: np.ndarray, w: int, h: int) -> np.ndarray:
    """Vectorized box sums for every valid top-left origin; shape (H-h+1, W-w+1)."""
    H, W = ii.shape
    if w < 1 or h < 1 or w > W or h > H:
        raise InputError(f"block {w}x{h} larger than {W}x{H} image")
    pad = np.zeros((H + 1, W + 1), dtype=np.int64)
    pad[1:, 1:] = ii
    return pad[h:, w:] - pad[h:, :-w] - pad[:-h, w:] + pad[:-h, :-w]


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear downscale/upscale of a uint8 grayscale raster."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if out_w < 1 or out_h < 1:
        raise ConfigError("output size must be positive")
    # Sample at pixel centers: maps output center k+0.5 to input coordinates.
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xs - x0
    fy = (ys - y0)[:, None]
    top = img[y0[:, None], x0] * (1 - fx) + img[y0[:, None], x1] * fx
    bot = img[y1[:, None], x0] * (1 - fx) + img[y1[:, None], x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class PyramidLevel:
    image: np.ndarray
    scale: float  # level pixels per original pixel (level = original * scale)
    index: int


def build_pyramid(img: np.ndarray, scale_factor: float = 1.25,
                  min_face: int = CANONICAL_WINDOW,
                  max_face: int | None = None) -> list[PyramidLevel]:
    """Image pyramid sized so a min_face-pixel face fills the canonical window.

    First level is scaled by 40/min_face; each following level shrinks by
    scale_factor until either dimension drops below the canonical window or
    the implied face size exceeds max_face.
    """
    img = np.asarray(img)
    if scale_factor <= 1:
        raise ConfigError("scale_factor must be > 1")
    if min_face < CANONICAL_WINDOW:
        raise ConfigError(f"min_face must be >= {CANONICAL_WINDOW}")
    H, W = img.shape
    levels: list[PyramidLevel] = []
    scale = CANONICAL_WINDOW / min_face
    index = 0
    while True:
        lw = int(round(W * scale))
        lh = int(round(H * scale))
        if lw < CANONICAL_WINDOW or lh < CANONICAL_WINDOW:
            break
        if max_face is not None and CANONICAL_WINDOW / scale > max_face:
            break
        if lw == W and lh == H:
            level_img = img
        else:
            level_img = resize_bilinear(img, lw, lh)
        levels.append(PyramidLevel(level_img, scale, index))
        scale /= scale_factor
        index += 1
    return levels


def enumerate_windows(level_width: int, level_height: int,
                      window: int = CANONICAL_WINDOW, stride: int = 2):
    """Yield WindowRects on the stride grid, row-major; empty if level too small."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    for y in range(0, level_height - window + 1, stride):
        for x in range(0, level_width - window + 1, stride):
            yield WindowRect(x, y, window, window)


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise InputError(f"{path} is not a binary PGM (P5) file")
    # Header: magic, width, height, maxval; comments start with '#'.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise InputError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise InputError(f"{path}: truncated pixel data")
    return pixels.reshape(height, width).copy()


def write_pgm(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale raster as binary PGM (P5)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_image(path, allow_png: bool = False) -> np.ndarray:
    """Load a grayscale raster: PGM always; PNG only when allow_png is set."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        return read_pgm(path)
    if path.lower().endswith(".png"):
        if not allow_png:
            raise ConfigError("PNG input requires the png feature switch")
        from PIL import Image

        img = np.asarray(Image.open(path).convert("RGB"))
        return to_grayscale(img)
    raise InputError(f"unsupported image format: {path}")


def window_origin_grid(level_width: int, level_height: int,
                       window: int = CANONICAL_WINDOW, stride: int = 2):
    """Window origins as coordinate arrays (xs, ys) for vectorized scanning."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    xs = np.arange(0, level_width - window + 1, stride)
    ys = np.arange(0, level_height - window + 1, stride)
    return xs, ys
