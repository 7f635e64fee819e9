import itertools
import json

import numpy as np
import pytest

from funnelcascade.funnel import (
    Detection,
    DetectParams,
    ModelFormatError,
    ModelHashError,
    ModelInvariantError,
    ModelVersionError,
    detect,
    detection_to_dict,
    format_detection,
    iou,
    load_model,
    model_to_dict,
    nms,
    save_model,
    surf_pool_hash,
)

from helpers import random_detection, tiny_model


def nms_oracle(dets, thr):
    """Brute-force subset check: the unique subset whose members are mutually
    non-overlapping and whose non-members each conflict with a kept
    higher-priority detection."""
    order = sorted(dets, key=lambda d: (-d.score, d.x, d.y, d.width, d.height))
    n = len(order)
    conflict = [[iou((a.x, a.y, a.width, a.height),
                     (b.x, b.y, b.width, b.height)) >= thr
                 for b in order] for a in order]
    valid = []
    for mask in range(1 << n):
        members = [i for i in range(n) if mask >> i & 1]
        ok = all(not conflict[i][j] for i, j in itertools.combinations(members, 2))
        if ok:
            # Every excluded detection must conflict with a kept higher-priority one.
            for i in range(n):
                if not mask >> i & 1 and not any(j < i and conflict[i][j]
                                                 for j in members):
                    ok = False
                    break
        if ok:
            valid.append(members)
    assert len(valid) == 1
    return [order[i] for i in valid[0]]


class TestIou:
    def test_identical_rects(self):
        assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint_rects(self):
        assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0

    def test_half_overlap(self):
        assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50 / 150)


class TestNms:
    def test_empty(self):
        assert nms([], 0.3) == []

    def test_identical_rects_keep_higher_score(self):
        a = Detection(0, 0, 10, 10, 0.9, [(0, 0)] * 4, frozenset({0}))
        b = Detection(0, 0, 10, 10, 0.8, [(0, 0)] * 4, frozenset({1}))
        kept = nms([a, b], 0.3)
        assert kept == [a]

    def test_idempotent_and_matches_bruteforce(self):
        rng = np.random.default_rng(300)
        for _ in range(200):
            n = int(rng.integers(0, 9))
            dets = [random_detection(rng) for _ in range(n)]
            out = nms(dets, 0.3)
            assert nms(out, 0.3) == out
            assert out == nms_oracle(dets, 0.3)

    def test_order_invariance(self):
        rng = np.random.default_rng(301)
        dets = [random_detection(rng) for _ in range(8)]
        out = nms(dets, 0.3)
        assert nms(list(reversed(dets)), 0.3) == out


class TestDetect:
    def test_blank_image_with_rejecting_stage1(self):
        model = tiny_model(accept=False)
        img = np.random.default_rng(310).integers(0, 256, (100, 100), dtype=np.uint8)
        dets, stats = detect(model, img, DetectParams(min_face=40))
        assert dets == []
        assert stats.after_stage1 == 0
        assert stats.time_stage2 == 0 or stats.after_stage2 == 0

    def test_counters_non_increasing(self):
        model = tiny_model(fine_threshold=0.5)
        img = np.random.default_rng(311).integers(0, 256, (90, 90), dtype=np.uint8)
        _, stats = detect(model, img, DetectParams(min_face=40, stride=4))
        assert stats.windows_total >= stats.after_stage1
        assert stats.after_stage1 >= stats.after_stage2 >= stats.after_stage3

    def test_accept_all_pipeline_produces_detections(self):
        model = tiny_model()
        img = np.random.default_rng(312).integers(0, 256, (80, 80), dtype=np.uint8)
        dets, stats = detect(model, img, DetectParams(min_face=40, stride=8))
        assert stats.after_stage1 == stats.windows_total
        assert len(dets) >= 1
        for d in dets:
            assert 0 < d.score < 1
            assert len(d.landmarks) == 4

    def test_image_smaller_than_min_face_empty(self):
        model = tiny_model()
        img = np.zeros((30, 30), dtype=np.uint8)
        dets, stats = detect(model, img, DetectParams(min_face=40))
        assert dets == [] and stats.windows_total == 0

    def test_one_lab_map_per_level(self):
        model = tiny_model(views=5, accept=False)
        img = np.zeros((120, 160), dtype=np.uint8)
        params = DetectParams(min_face=40, stride=4)
        _, stats = detect(model, img, params)
        from funnelcascade.imaging import build_pyramid
        n_levels = len(build_pyramid(img, params.scale_factor, params.min_face))
        assert stats.lab_maps_built == n_levels

    def test_detections_in_original_coordinates(self):
        model = tiny_model()
        img = np.random.default_rng(313).integers(0, 256, (160, 160), dtype=np.uint8)
        dets, _ = detect(model, img, DetectParams(min_face=80, stride=8))
        for d in dets:
            # Faces no smaller than min_face, in original-image pixels.
            assert d.width >= 79
            assert 0 <= d.x <= 160 and 0 <= d.y <= 160
            assert d.x + d.width <= 161 and d.y + d.height <= 161


class TestOutputFormats:
    def test_text_line_shape(self):
        d = Detection(1, 2, 40, 40, 0.75, [(3, 4), (5, 6), (7, 8), (9, 10)],
                      frozenset({0, 2}))
        line = format_detection(d)
        parts = line.split()
        assert len(parts) == 14
        assert parts[4] == "0.750000"
        assert parts[-1] == "0,2"

    def test_json_variant_same_content(self):
        d = Detection(1, 2, 40, 40, 0.75, [(3, 4), (5, 6), (7, 8), (9, 10)],
                      frozenset({1}))
        rec = detection_to_dict(d)
        assert rec["score"] == 0.75
        assert rec["views"] == [1]
        assert rec["landmarks"][2] == [7, 8]


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model(views=5)
        p1 = tmp_path / "m1.json"
        p2 = tmp_path / "m2.json"
        save_model(model, p1)
        loaded = load_model(p1)
        save_model(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parameters_survive_round_trip(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "m.json"
        save_model(model, path)
        loaded = load_model(path)
        for a, b in zip(model.lab_cascades, loaded.lab_cascades):
            assert a.threshold == b.threshold
            for wa, wb in zip(a.weak, b.weak):
                np.testing.assert_array_equal(wa.lut, wb.lut)
        for sa, sb in zip(model.topology.fine_cascade, loaded.topology.fine_cascade):
            for wa, wb in zip(sa.model.weights, sb.model.weights):
                np.testing.assert_array_equal(wa, wb)

    def test_truncated_file_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "m.json"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[: path.stat().st_size // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_version_mismatch_rejected(self, tmp_path):
        data = model_to_dict(tiny_model())
        data["format"] = "fust-model/99"
        path = tmp_path / "m.json"
        path.write_text(json.dumps(data))
        with pytest.raises(ModelVersionError):
            load_model(path)

    def test_tampered_pool_hash_rejected(self, tmp_path):
        data = model_to_dict(tiny_model())
        data["surf_pool_hash"] = "0" * 64
        path = tmp_path / "m.json"
        path.write_text(json.dumps(data))
        with pytest.raises(ModelHashError):
            load_model(path)

    def test_invariant_violation_rejected(self, tmp_path):
        data = model_to_dict(tiny_model())
        data["topology"]["view_to_branch"] = [0, 0, 9]
        path = tmp_path / "m.json"
        path.write_text(json.dumps(data))
        with pytest.raises(ModelInvariantError):
            load_model(path)

    def test_pool_hash_is_hex64(self):
        h = surf_pool_hash()
        assert len(h) == 64
        int(h, 16)
