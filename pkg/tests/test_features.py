import math

import numpy as np
import pytest

from funnelcascade.features import (
    DEFAULT_BLOCK_SIZES,
    LabFeatureLocator,
    Shape4,
    SurfPatch,
    compute_lab_map,
    default_surf_pool,
    enumerate_locators,
    lab_code_at,
    shape_indexed_features,
    sift_descriptor,
    surf_descriptor,
)
from funnelcascade.imaging import ConfigError, InputError, WindowRect, integral_image


def block_sum_loop(img, x, y, w, h):
    return sum(int(img[yy, xx]) for yy in range(y, y + h) for xx in range(x, x + w))


def lab_code_oracle(img, x, y, bw, bh):
    """Direct 8-comparison oracle over block sums."""
    if x + 3 * bw > img.shape[1] or y + 3 * bh > img.shape[0]:
        return 0
    center = block_sum_loop(img, x + bw, y + bh, bw, bh)
    offsets = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    code = 0
    for bit, (ox, oy) in enumerate(offsets):
        nb = block_sum_loop(img, x + (ox + 1) * bw, y + (oy + 1) * bh, bw, bh)
        if center > nb:
            code |= 1 << bit
    return code


class TestLabMap:
    def test_constant_image_all_zero(self):
        lab = compute_lab_map(np.full((40, 40), 50, dtype=np.uint8))
        for raster in lab.codes:
            assert (raster == 0).all()

    def test_bright_center_block(self):
        img = np.zeros((40, 40), dtype=np.uint8)
        img[4:8, 4:8] = 200  # center block of the grid rooted at (0, 0), size 4
        lab = compute_lab_map(img)
        assert lab.codes[0][0, 0] == 255

    def test_random_codes_match_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            img = rng.integers(0, 256, size=(24, 24), dtype=np.uint8)
            lab = compute_lab_map(img, block_sizes=((4, 4),))
            pts = rng.integers(0, 24, size=(40, 2))
            for x, y in pts:
                assert lab.codes[0][y, x] == lab_code_oracle(img, x, y, 4, 4)

    def test_exhaustive_small_image(self):
        rng = np.random.default_rng(11)
        img = rng.integers(0, 256, size=(18, 20), dtype=np.uint8)
        lab = compute_lab_map(img, block_sizes=((4, 4),))
        for y in range(18):
            for x in range(20):
                assert lab.codes[0][y, x] == lab_code_oracle(img, x, y, 4, 4)

    def test_too_small_image(self):
        with pytest.raises(InputError):
            compute_lab_map(np.zeros((8, 8), dtype=np.uint8))


class TestLabCodeAt:
    def test_lookup_matches_direct_comparison(self):
        rng = np.random.default_rng(12)
        img = rng.integers(0, 256, size=(80, 100), dtype=np.uint8)
        lab = compute_lab_map(img)
        for _ in range(300):
            wx = int(rng.integers(0, 60))
            wy = int(rng.integers(0, 40))
            win = WindowRect(wx, wy, 40, 40)
            bi = int(rng.integers(0, 2))
            bw, bh = DEFAULT_BLOCK_SIZES[bi]
            dx = int(rng.integers(0, 40 - 3 * bw + 1))
            dy = int(rng.integers(0, 40 - 3 * bh + 1))
            loc = LabFeatureLocator(dx, dy, bi)
            assert lab_code_at(lab, win, loc) == lab_code_oracle(img, wx + dx, wy + dy, bw, bh)

    def test_origin_lookup(self):
        img = np.random.default_rng(13).integers(0, 256, (50, 50), dtype=np.uint8)
        lab = compute_lab_map(img)
        win = WindowRect(0, 0, 40, 40)
        loc = LabFeatureLocator(0, 0, 0)
        assert lab_code_at(lab, win, loc) == lab.codes[0][0, 0]

    def test_translation_identity(self):
        img = np.random.default_rng(14).integers(0, 256, (60, 60), dtype=np.uint8)
        lab = compute_lab_map(img)
        loc = LabFeatureLocator(3, 5, 0)
        a = lab_code_at(lab, WindowRect(2, 4, 40, 40), loc)
        assert a == lab.codes[0][4 + 5, 2 + 3]
        b = lab_code_at(lab, WindowRect(9, 11, 40, 40), loc)
        assert b == lab.codes[0][11 + 5, 9 + 3]

    def test_enumerate_locators_fit(self):
        for loc in enumerate_locators():
            loc.validate()


class TestSurfPool:
    def test_pool_size_56(self):
        assert len(default_surf_pool()) == 56

    def test_all_inside_window(self):
        for p in default_surf_pool():
            assert 0 <= p.x and 0 <= p.y
            assert p.x + p.width <= 40 and p.y + p.height <= 40

    def test_16x16_has_9_placements(self):
        pool = [p for p in default_surf_pool() if p.width == 16 and p.height == 16]
        assert len(pool) == 9
        assert sorted({p.x for p in pool}) == [0, 16, 24]
        assert sorted({p.y for p in pool}) == [0, 16, 24]

    def test_pool_deterministic(self):
        assert default_surf_pool() == default_surf_pool()


def surf_oracle(img, wx, wy, patch):
    """Per-pixel gradient-loop oracle for the 32-dim SURF descriptor."""
    desc = [0.0] * 32
    px, py = wx + patch.x, wy + patch.y
    nx, ny = patch.width - 1, patch.height - 1
    for j in range(ny):
        for i in range(nx):
            x, y = px + i, py + j
            dx = (int(img[y, x + 1]) + int(img[y + 1, x + 1])
                  - int(img[y, x]) - int(img[y + 1, x]))
            dy = (int(img[y + 1, x]) + int(img[y + 1, x + 1])
                  - int(img[y, x]) - int(img[y, x + 1]))
            cx = min(int(i / (nx / 2)), 1)
            cy = min(int(j / (ny / 2)), 1)
            base = 8 * (2 * cy + cx)
            if dy >= 0:
                desc[base + 0] += dx
                desc[base + 1] += abs(dx)
            else:
                desc[base + 2] += dx
                desc[base + 3] += abs(dx)
            if dx >= 0:
                desc[base + 4] += dy
                desc[base + 5] += abs(dy)
            else:
                desc[base + 6] += dy
                desc[base + 7] += abs(dy)
    norm = math.sqrt(sum(d * d for d in desc))
    if norm > 0:
        desc = [d / norm for d in desc]
    return np.array(desc)


class TestSurfDescriptor:
    def test_constant_image_zero_vector(self):
        img = np.full((40, 40), 120, dtype=np.uint8)
        ii = integral_image(img)
        d = surf_descriptor(ii, WindowRect(0, 0, 40, 40), SurfPatch(0, 0, 16, 16))
        assert (d == 0).all()

    def test_norm_is_zero_or_one(self):
        rng = np.random.default_rng(20)
        img = rng.integers(0, 256, size=(60, 60), dtype=np.uint8)
        ii = integral_image(img)
        for p in default_surf_pool()[::7]:
            d = surf_descriptor(ii, WindowRect(10, 10, 40, 40), p)
            assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-9)

    def test_vertical_edge(self):
        img = np.zeros((40, 40), dtype=np.uint8)
        img[:, 20:] = 200
        ii = integral_image(img)
        d = surf_descriptor(ii, WindowRect(0, 0, 40, 40), SurfPatch(0, 0, 40, 40))
        # dy responses vanish everywhere; only dx statistics carry energy.
        dy_terms = np.abs(d.reshape(4, 8)[:, 4:]).sum()
        dx_terms = np.abs(d.reshape(4, 8)[:, :4]).sum()
        assert dy_terms == 0
        assert dx_terms > 0

    def test_matches_gradient_loop_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            img = rng.integers(0, 256, size=(56, 56), dtype=np.uint8)
            ii = integral_image(img)
            wx, wy = int(rng.integers(0, 16)), int(rng.integers(0, 16))
            patch = default_surf_pool()[int(rng.integers(0, 56))]
            got = surf_descriptor(ii, WindowRect(wx, wy, 40, 40), patch)
            want = surf_oracle(img, wx, wy, patch)
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_degenerate_patch(self):
        ii = integral_image(np.zeros((40, 40), dtype=np.uint8))
        with pytest.raises(ConfigError):
            surf_descriptor(ii, WindowRect(0, 0, 40, 40), SurfPatch(0, 0, 2, 8))


def sift_oracle(img, point, radius=8):
    """Straightforward per-pixel reference for the upright SIFT descriptor."""
    img = np.asarray(img, dtype=float)
    H, W = img.shape
    u = min(max(point[0], 0.0), 1.0)
    v = min(max(point[1], 0.0), 1.0)
    cx, cy = u * (W - 1), v * (H - 1)
    x0 = int(math.floor(cx)) - radius + 1
    y0 = int(math.floor(cy)) - radius + 1
    hist = np.zeros((4, 4, 8))
    for y in range(y0, y0 + 2 * radius):
        for x in range(x0, x0 + 2 * radius):
            if not (0 <= x < W and 0 <= y < H):
                continue
            gx = (img[y, x + 1] - img[y, x - 1]) / 2.0 if 0 < x < W - 1 else 0.0
            gy = (img[y + 1, x] - img[y - 1, x]) / 2.0 if 0 < y < H - 1 else 0.0
            mag = math.hypot(gx, gy)
            if mag == 0:
                continue
            ori = math.atan2(gy, gx) % (2 * math.pi)
            w = math.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * radius ** 2))
            bx = (x - cx + radius) * (4.0 / (2 * radius)) - 0.5
            by = (y - cy + radius) * (4.0 / (2 * radius)) - 0.5
            bo = ori * (8.0 / (2 * math.pi))
            ix0, iy0, io0 = math.floor(bx), math.floor(by), math.floor(bo)
            fx, fy, fo = bx - ix0, by - iy0, bo - io0
            for dy in (0, 1):
                for dx in (0, 1):
                    for do in (0, 1):
                        yb, xb = iy0 + dy, ix0 + dx
                        if not (0 <= yb < 4 and 0 <= xb < 4):
                            continue
                        ww = (mag * w * (fy if dy else 1 - fy)
                              * (fx if dx else 1 - fx) * (fo if do else 1 - fo))
                        hist[yb, xb, (io0 + do) % 8] += ww
    desc = hist.reshape(-1)
    norm = np.linalg.norm(desc)
    if norm == 0:
        return desc
    desc = np.minimum(desc / norm, 0.2)
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 0 else desc


class TestSiftDescriptor:
    def test_constant_patch_zero(self):
        img = np.full((40, 40), 99, dtype=np.uint8)
        assert (sift_descriptor(img, (0.5, 0.5)) == 0).all()

    def test_unit_norm(self):
        img = np.random.default_rng(30).integers(0, 256, (40, 40), dtype=np.uint8)
        d = sift_descriptor(img, (0.4, 0.6))
        assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_reference_loop(self, seed):
        rng = np.random.default_rng(100 + seed)
        img = rng.integers(0, 256, size=(40, 40), dtype=np.uint8)
        point = tuple(rng.uniform(0, 1, size=2))
        got = sift_descriptor(img, point)
        want = sift_oracle(img, point)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_point_clamped_outside(self):
        img = np.random.default_rng(31).integers(0, 256, (40, 40), dtype=np.uint8)
        np.testing.assert_array_equal(sift_descriptor(img, (-0.5, 0.3)),
                                      sift_descriptor(img, (0.0, 0.3)))


class TestShapeIndexedFeatures:
    def test_dimension_512(self):
        img = np.random.default_rng(40).integers(0, 256, (40, 40), dtype=np.uint8)
        s = Shape4(((0.3, 0.4), (0.7, 0.4), (0.5, 0.6), (0.5, 0.8)))
        assert shape_indexed_features(img, s).shape == (512,)

    def test_coincident_eyes_give_identical_blocks(self):
        img = np.random.default_rng(41).integers(0, 256, (40, 40), dtype=np.uint8)
        s = Shape4(((0.35, 0.4), (0.35, 0.4), (0.45, 0.6), (0.45, 0.8)))
        f = shape_indexed_features(img, s)
        np.testing.assert_array_equal(f[:128], f[128:256])

    def test_out_of_window_landmarks_clamped(self):
        img = np.random.default_rng(42).integers(0, 256, (40, 40), dtype=np.uint8)
        wild = Shape4(((-0.2, 0.4), (1.4, 0.4), (0.5, 0.6), (0.5, 1.2)))
        tame = Shape4(((0.0, 0.4), (1.0, 0.4), (0.5, 0.6), (0.5, 1.0)))
        np.testing.assert_array_equal(shape_indexed_features(img, wild),
                                      shape_indexed_features(img, tame))

    def test_shape_vector_round_trip(self):
        s = Shape4(((0.1, 0.2), (0.3, 0.4), (0.5, 0.6), (0.7, 0.8)))
        assert Shape4.from_vector(s.to_vector()) == s
