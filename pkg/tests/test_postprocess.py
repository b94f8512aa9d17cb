import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eresfd import builders, postprocess, weights
from eresfd.postprocess import (
    DetBox,
    anchors_for_grids,
    box_voting,
    decode_boxes,
    detect,
    encode_boxes,
    generate_anchors,
    iou,
    merge_passes,
    nms,
)

from oracles import iou_pair, nms_reference


def random_boxes(n, rng, span=40.0):
    x1 = rng.uniform(0, span, n)
    y1 = rng.uniform(0, span, n)
    w = rng.uniform(5, 15, n)
    h = rng.uniform(5, 15, n)
    boxes = np.stack([x1, y1, x1 + w, y1 + h], axis=1)
    scores = rng.uniform(0.01, 1.0, n)
    return boxes, scores


class TestAnchors:
    def test_counts_at_640(self):
        a = generate_anchors((640, 640))
        assert [len(lv) for lv in a.levels] == [25600, 6400, 1600, 400, 100, 25]
        assert a.total == 34_125

    def test_d3_anchor_dimensions(self):
        a = generate_anchors((640, 640))
        d3 = a.levels[2]
        assert np.all(d3[:, 2] == 64)
        assert np.all(d3[:, 3] == 80)
        assert np.allclose(d3[:, 3], 1.25 * d3[:, 2])

    def test_first_cell_center(self):
        a = generate_anchors((640, 640))
        assert a.levels[0][0].tolist() == [2.0, 2.0, 16.0, 20.0]

    def test_row_major_ordering(self):
        a = anchors_for_grids([(2, 3)], strides=[4], sizes=[16])
        centers = a.levels[0][:, :2].tolist()
        assert centers == [[2, 2], [6, 2], [10, 2], [2, 6], [6, 6], [10, 6]]

    def test_undersized_image_rejected(self):
        with pytest.raises(ValueError, match="smaller than"):
            generate_anchors((64, 640))

    def test_ceil_cell_counts(self):
        a = generate_anchors((480, 640))
        assert a.grids == [(math.ceil(480 / s), math.ceil(640 / s))
                           for s in builders.LEVEL_STRIDES]


class TestDecode:
    def test_zero_deltas_identity(self):
        anchors = np.array([[10, 20, 4, 5]], np.float32)
        out = decode_boxes(np.zeros((1, 4), np.float32), anchors)
        assert np.allclose(out, [[8, 17.5, 12, 22.5]])

    def test_width_doubling_delta(self):
        anchors = np.array([[0, 0, 10, 10]], np.float32)
        d = np.array([[0, 0, math.log(2) / 0.2, 0]], np.float32)
        out = decode_boxes(d, anchors)
        assert out[0, 2] - out[0, 0] == pytest.approx(20, rel=1e-5)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        anchors = np.stack([rng.uniform(10, 100, 50), rng.uniform(10, 100, 50),
                            rng.uniform(4, 30, 50), rng.uniform(4, 30, 50)], axis=1)
        deltas = rng.normal(0, 1, (50, 4)).astype(np.float32)
        boxes = decode_boxes(deltas, anchors)
        back = encode_boxes(boxes, anchors)
        assert np.abs(back - deltas).max() < 1e-4

    def test_map_input_accepted(self):
        anchors = anchors_for_grids([(2, 2)], strides=[4], sizes=[16]).levels[0]
        deltas = np.zeros((1, 4, 2, 2), np.float32)
        out = decode_boxes(deltas, anchors)
        assert out.shape == (4, 4)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="deltas for"):
            decode_boxes(np.zeros((3, 4)), np.zeros((2, 4)))


class TestIoU:
    def test_identical(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_one_third(self):
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_accepts_detbox(self):
        a = DetBox(0, 0, 2, 2, 0.5)
        assert iou(a, a) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        (a, b), _ = random_boxes(2, rng), None
        va = iou(a[0], a[1])
        assert va == pytest.approx(iou(a[1], a[0]))
        assert 0.0 <= va <= 1.0
        assert va == pytest.approx(iou_pair(a[0], a[1]), abs=1e-9)


class TestNMS:
    def test_single_box(self):
        keep = nms(np.array([[0, 0, 1, 1]]), np.array([0.5]), 0.5)
        assert keep.tolist() == [0]

    def test_two_identical_boxes(self):
        boxes = np.array([[0, 0, 2, 2], [0, 0, 2, 2]], float)
        keep = nms(boxes, np.array([0.9, 0.8]), 0.5)
        assert keep.tolist() == [0]

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            boxes, scores = random_boxes(200, rng)
            got = nms(boxes, scores, 0.5).tolist()
            assert got == nms_reference(boxes, scores, 0.5)

    def test_order_independence(self):
        rng = np.random.default_rng(11)
        boxes, scores = random_boxes(80, rng)
        keep = nms(boxes, scores, 0.4)
        perm = rng.permutation(len(scores))
        keep_p = nms(boxes[perm], scores[perm], 0.4)
        assert sorted(perm[keep_p].tolist()) == sorted(keep.tolist())
        assert np.allclose(boxes[perm][keep_p], boxes[keep])

    def test_deterministic_tie_break(self):
        boxes = np.array([[0, 0, 1, 1], [10, 10, 11, 11]], float)
        keep = nms(boxes, np.array([0.5, 0.5]), 0.5)
        assert keep.tolist() == [0, 1]  # equal scores keep input order

    def test_translation_equivariance(self):
        rng = np.random.default_rng(13)
        boxes, scores = random_boxes(60, rng)
        keep = nms(boxes, scores, 0.4)
        shifted = boxes + np.array([17.0, -4.0, 17.0, -4.0])
        assert nms(shifted, scores, 0.4).tolist() == keep.tolist()


class TestBoxVoting:
    def test_self_vote_only(self):
        kept = np.array([[0, 0, 10, 10]], float)
        out = box_voting(kept, kept, np.array([0.9]))
        assert np.allclose(out, kept)

    def test_worked_example(self):
        all_boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 12]], float)
        all_scores = np.array([0.9, 0.1])
        out = box_voting(all_boxes[:1], all_boxes, all_scores, iou_threshold=0.3)
        assert np.allclose(out, [[0, 0, 10, 10.2]], atol=1e-6)

    def test_identical_neighbors_keep_coords(self):
        all_boxes = np.tile(np.array([[1, 2, 8, 9]], float), (5, 1))
        out = box_voting(all_boxes[:1], all_boxes, np.linspace(0.1, 0.9, 5))
        assert np.allclose(out, [[1, 2, 8, 9]])

    def test_convex_hull(self):
        rng = np.random.default_rng(5)
        base = np.array([10, 10, 30, 30], float)
        neighbors = base + rng.uniform(-2, 2, (10, 4))
        scores = rng.uniform(0.1, 1, 10)
        out = box_voting(base[None], neighbors, scores, iou_threshold=0.3)
        mask = postprocess.iou_matrix(base[None], neighbors)[0] >= 0.3
        assert (out >= neighbors[mask].min(axis=0) - 1e-6).all()
        assert (out <= neighbors[mask].max(axis=0) + 1e-6).all()


class TestMergePasses:
    def test_single_pass_equals_nms_plus_voting(self):
        rng = np.random.default_rng(17)
        boxes, scores = random_boxes(50, rng)
        got_b, got_s = merge_passes([(boxes, scores)], (100, 100))
        keep = nms(boxes, scores, 0.3)
        want = postprocess.clip_boxes(
            box_voting(boxes[keep], boxes, scores, 0.3), (100, 100))
        assert np.allclose(got_b, want)
        assert np.allclose(got_s, scores[keep])

    def test_duplicate_pass_invariance(self):
        rng = np.random.default_rng(19)
        boxes, scores = random_boxes(40, rng)
        one_b, one_s = merge_passes([(boxes, scores)], (100, 100))
        two_b, two_s = merge_passes([(boxes, scores), (boxes, scores)], (100, 100))
        assert np.allclose(np.sort(one_s), np.sort(two_s))
        assert np.allclose(one_b, two_b, atol=1e-5)

    def test_symmetric_flip_fixture(self):
        # a mirror-symmetric detection set merged with its flip stays symmetric
        W = 100.0
        boxes = np.array([[10, 10, 30, 30], [70, 10, 90, 30]], float)
        scores = np.array([0.8, 0.8])
        flipped = boxes.copy()
        flipped[:, [0, 2]] = W - boxes[:, [2, 0]]
        out_b, _ = merge_passes([(boxes, scores), (flipped, scores)], (100, 100))
        mirrored = out_b.copy()
        mirrored[:, [0, 2]] = W - out_b[:, [2, 0]]
        for row in mirrored:
            assert min(np.abs(out_b - row).max(axis=1)) < 1e-5

    def test_empty_passes_rejected(self):
        with pytest.raises(ValueError):
            merge_passes([], (10, 10))


@pytest.fixture(scope="module")
def model():
    g = builders.build_eresfd()
    return g, weights.init_random_weights(g, 0)


class TestDetect:
    def test_high_threshold_returns_empty_without_error(self, model):
        g, _ = model
        # low-gain random weights keep class scores near chance level
        rng = np.random.default_rng(4)
        store = {k: (0.01 * rng.normal(0, 1, s)).astype(np.float32)
                 for k, s in g.weight_shapes().items()}
        x = np.random.default_rng(1).normal(0, 1, (1, 3, 128, 128)).astype(np.float32)
        dets = detect(g, store, x, score_threshold=0.99)
        assert dets == []

    def test_saturated_random_weights_never_error(self, model):
        g, store = model  # He-init weights saturate scores; must still be robust
        x = np.random.default_rng(1).normal(0, 40, (1, 3, 128, 128)).astype(np.float32)
        dets = detect(g, store, x, score_threshold=0.999999)
        for d in dets:
            assert d.x1 < d.x2 and d.y1 < d.y2
            assert np.isfinite([d.x1, d.y1, d.x2, d.y2, d.score]).all()

    def test_all_face_logit_fixture_fills_anchors(self, model):
        g, _ = model
        store = {k: np.zeros(s, np.float32) for k, s in g.weight_shapes().items()}
        for name in store:
            if name.startswith("neck.fuse"):
                store[name][:] = 1.0
            if name.startswith("head.") and name.endswith("cls.bias"):
                store[name][-1] = 12.0  # face logit wins everywhere
        x = np.zeros((1, 3, 128, 128), np.float32)
        outputs = postprocess.graphmod.forward(g, store, x)
        boxes, scores = postprocess._level_candidates(outputs, 0.5, topk=10**6)
        grids = [outputs[f"D{k}.cls"].shape[2:] for k in range(1, 7)]
        assert len(boxes) == anchors_for_grids(grids).total
        assert (scores > 0.99).all()

    def test_output_contract(self, model):
        g, store = model
        x = np.random.default_rng(2).normal(0, 40, (1, 3, 128, 160)).astype(np.float32)
        dets = detect(g, store, x, score_threshold=0.05)
        for d in dets:
            assert d.x1 < d.x2 and d.y1 < d.y2
            assert d.score >= 0.05
            assert 0 <= d.x1 <= 160 and 0 <= d.x2 <= 160
            assert 0 <= d.y1 <= 128 and 0 <= d.y2 <= 128
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)

    def test_flip_and_scales_run(self, model):
        g, store = model
        x = np.random.default_rng(3).normal(0, 40, (1, 3, 128, 128)).astype(np.float32)
        dets = detect(g, store, x, score_threshold=0.2, flip=True, scales=[1.25])
        for d in dets:
            assert d.x1 < d.x2 and d.y1 < d.y2

    def test_format_lines(self):
        text = postprocess.format_detections(
            [DetBox(1, 2, 3, 4, 0.5), DetBox(0, 0, 1, 1, 0.25)])
        lines = text.splitlines()
        assert lines[0] == "1.000000 2.000000 3.000000 4.000000 0.500000"
        assert len(lines) == 2
