"""Anchor generation, box decoding, NMS, box voting and pass merging.

Boxes are float (x1, y1, x2, y2) in input-image pixels.  Array-valued
helpers carry boxes as (N, 4) float arrays with separate score vectors;
`detect` returns the friendlier DetBox list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import builders, graph as graphmod, imageio
from .graph import ModelGraph

ASPECT = 1.25  # anchor "size" names the width; height = 1.25 * size
VARIANCES = (0.1, 0.2)
MERGE_IOU = 0.3
DEFAULT_SCORE_THRESHOLD = 0.05
TOPK_PER_LEVEL = 5000
MIN_IMAGE_SIDE = 128  # guarantees every anchor level covers >= 1 cell


@dataclass
class DetBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float


@dataclass
class AnchorSet:
    """Per-level prior boxes as (N, 4) center-form (cx, cy, w, h) arrays."""
    levels: list[np.ndarray]
    grids: list[tuple[int, int]]
    strides: tuple[int, ...] = builders.LEVEL_STRIDES
    sizes: tuple[int, ...] = builders.ANCHOR_SIZES

    @property
    def total(self) -> int:
        return sum(len(a) for a in self.levels)

    def concat(self) -> np.ndarray:
        return np.concatenate(self.levels, axis=0)


def _level_anchors(grid_h: int, grid_w: int, stride: int, size: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    cx = (xs.ravel() + 0.5) * stride
    cy = (ys.ravel() + 0.5) * stride
    w = np.full(cx.shape, float(size))
    h = np.full(cx.shape, ASPECT * size)
    return np.stack([cx, cy, w, h], axis=1).astype(np.float32)


def anchors_for_grids(grids: Sequence[tuple[int, int]],
                      strides: Sequence[int] = builders.LEVEL_STRIDES,
                      sizes: Sequence[int] = builders.ANCHOR_SIZES) -> AnchorSet:
    """One anchor per cell of each detection-layer grid."""
    if len(grids) != len(strides) or len(grids) != len(sizes):
        raise ValueError("one grid per detection level required")
    levels = [_level_anchors(gh, gw, s, z)
              for (gh, gw), s, z in zip(grids, strides, sizes)]
    return AnchorSet(levels=levels, grids=[tuple(g) for g in grids],
                     strides=tuple(strides), sizes=tuple(sizes))


def generate_anchors(image_hw: tuple[int, int]) -> AnchorSet:
    """Anchors for an image, one per ceil(H/stride) x ceil(W/stride) cell."""
    h, w = image_hw
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValueError(f"image {h}x{w} smaller than minimum side {MIN_IMAGE_SIDE}")
    grids = [(math.ceil(h / s), math.ceil(w / s)) for s in builders.LEVEL_STRIDES]
    return anchors_for_grids(grids)


def map_to_rows(x: np.ndarray) -> np.ndarray:
    """(1, c, h, w) head map -> (h*w, c) rows in anchor (row-major) order."""
    _, c, h, w = x.shape
    return np.ascontiguousarray(x[0].reshape(c, h * w).T)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray,
                 variances: tuple[float, float] = VARIANCES) -> np.ndarray:
    """SSD-style decoding of (N, 4) deltas against (N, 4) cxcywh anchors."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if deltas.ndim == 4:
        deltas = map_to_rows(deltas).astype(np.float64)
    if deltas.shape != anchors.shape:
        raise ValueError(f"{deltas.shape[0]} deltas for {anchors.shape[0]} anchors")
    v0, v1 = variances
    with np.errstate(over="ignore"):  # extreme deltas go inf; callers filter
        cx = anchors[:, 0] + deltas[:, 0] * v0 * anchors[:, 2]
        cy = anchors[:, 1] + deltas[:, 1] * v0 * anchors[:, 3]
        w = anchors[:, 2] * np.exp(deltas[:, 2] * v1)
        h = anchors[:, 3] * np.exp(deltas[:, 3] * v1)
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2],
                        axis=1).astype(np.float32)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray,
                 variances: tuple[float, float] = VARIANCES) -> np.ndarray:
    """Inverse of decode_boxes, for round-trip checks and fixtures."""
    boxes = np.asarray(boxes, dtype=np.float32)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    v0, v1 = variances
    return np.stack([
        (cx - anchors[:, 0]) / (v0 * anchors[:, 2]),
        (cy - anchors[:, 1]) / (v0 * anchors[:, 3]),
        np.log(w / anchors[:, 2]) / v1,
        np.log(h / anchors[:, 3]) / v1,
    ], axis=1)


def iou(a, b) -> float:
    """Intersection over union of two boxes; degenerate unions give 0."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union) if union > 0 else 0.0


def _corners(b):
    if isinstance(b, DetBox):
        return b.x1, b.y1, b.x2, b.y2
    return float(b[0]), float(b[1]), float(b[2]), float(b[3])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) pairwise IoU."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy score-descending suppression; ties break on the smaller index.

    Returns kept indices ordered by descending score, so the result does
    not depend on the input ordering.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes for {len(scores)} scores")
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ious < iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def box_voting(kept_boxes: np.ndarray, all_boxes: np.ndarray,
               all_scores: np.ndarray, iou_threshold: float = MERGE_IOU) -> np.ndarray:
    """Replace each kept box by the score-weighted mean of its neighbours.

    Neighbours are every candidate with IoU >= threshold against the kept
    box (each kept box neighbours itself at IoU 1); scores are unchanged.
    """
    kept_boxes = np.asarray(kept_boxes, dtype=np.float64).reshape(-1, 4)
    all_boxes = np.asarray(all_boxes, dtype=np.float64).reshape(-1, 4)
    all_scores = np.asarray(all_scores, dtype=np.float64).reshape(-1)
    if kept_boxes.size == 0:
        return kept_boxes.astype(np.float32)
    ious = iou_matrix(kept_boxes, all_boxes)
    voted = np.empty_like(kept_boxes)
    for i in range(len(kept_boxes)):
        mask = ious[i] >= iou_threshold
        w = all_scores[mask]
        if w.sum() <= 0:  # degenerate box with no usable neighbours
            voted[i] = kept_boxes[i]
            continue
        voted[i] = (w[:, None] * all_boxes[mask]).sum(axis=0) / w.sum()
    return voted.astype(np.float32)


def clip_boxes(boxes: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    h, w = image_hw
    out = np.array(boxes, dtype=np.float32)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, h)
    return out


def merge_passes(passes: Sequence[tuple[np.ndarray, np.ndarray]],
                 image_hw: tuple[int, int],
                 iou_threshold: float = MERGE_IOU) -> tuple[np.ndarray, np.ndarray]:
    """Merge prediction passes: concatenate, NMS, box-vote, clip to image.

    Each pass is (boxes, scores) already mapped to original coordinates.
    Degenerate boxes left after clipping are dropped.
    """
    if not passes:
        raise ValueError("merge_passes needs at least one pass")
    boxes = np.concatenate([np.asarray(b, dtype=np.float32).reshape(-1, 4)
                            for b, _ in passes], axis=0)
    scores = np.concatenate([np.asarray(s, dtype=np.float32).reshape(-1)
                             for _, s in passes], axis=0)
    if len(boxes) == 0:
        return boxes, scores
    keep = nms(boxes, scores, iou_threshold)
    voted = box_voting(boxes[keep], boxes, scores, iou_threshold)
    voted = clip_boxes(voted, image_hw)
    ok = (voted[:, 2] > voted[:, 0]) & (voted[:, 3] > voted[:, 1])
    return voted[ok], scores[keep][ok]


# ---------------------------------------------------------------------------
# end-to-end detection

def _level_candidates(outputs: Mapping[str, np.ndarray], score_threshold: float,
                      topk: int) -> tuple[np.ndarray, np.ndarray]:
    """Thresholded, per-level top-k candidates decoded against anchors."""
    levels = sorted({int(k[1]) for k in outputs if k.endswith(".cls")})
    grids = [outputs[f"D{k}.cls"].shape[2:] for k in levels]
    anchors = anchors_for_grids(grids)
    boxes_all, scores_all = [], []
    for k, anc in zip(levels, anchors.levels):
        probs = map_to_rows(outputs[f"D{k}.cls"])[:, 1]  # (background, face)
        sel = np.nonzero(probs >= score_threshold)[0]
        if sel.size > topk:
            sel = sel[np.argsort(-probs[sel], kind="stable")[:topk]]
        if sel.size == 0:
            continue
        deltas = map_to_rows(outputs[f"D{k}.reg"])[sel]
        boxes = decode_boxes(deltas, anc[sel])
        finite = np.isfinite(boxes).all(axis=1)  # extreme deltas overflow exp
        boxes_all.append(boxes[finite])
        scores_all.append(probs[sel][finite])
    if not boxes_all:
        return np.zeros((0, 4), np.float32), np.zeros((0,), np.float32)
    return np.concatenate(boxes_all), np.concatenate(scores_all)


def detect(graph: ModelGraph, weights: Mapping[str, np.ndarray], image: np.ndarray,
           score_threshold: float = DEFAULT_SCORE_THRESHOLD,
           flip: bool = False, scales: Sequence[float] = (),
           topk: int = TOPK_PER_LEVEL, conv_method: str = "im2col") -> list[DetBox]:
    """Run the detector, optionally with flip / multi-scale passes, and
    return merged, clipped boxes sorted by descending score."""
    n, c, H, W = image.shape
    all_scales = [1.0] + [float(s) for s in scales if float(s) != 1.0]
    passes = []
    for s in all_scales:
        if s == 1.0:
            img_s, (hs, ws) = image, (H, W)
        else:
            hs, ws = max(1, round(H * s)), max(1, round(W * s))
            img_s = imageio.resize_nearest(image, hs, ws)
        variants = [(img_s, False)]
        if flip:
            variants.append((imageio.flip_horizontal(img_s), True))
        for img, flipped in variants:
            outputs = graphmod.forward(graph, weights, img, conv_method=conv_method)
            boxes, scr = _level_candidates(outputs, score_threshold, topk)
            if flipped and len(boxes):
                x1 = ws - boxes[:, 2].copy()
                x2 = ws - boxes[:, 0].copy()
                boxes[:, 0], boxes[:, 2] = x1, x2
            if s != 1.0 and len(boxes):
                boxes[:, 0::2] /= ws / W
                boxes[:, 1::2] /= hs / H
            passes.append((boxes, scr))
    boxes, scores = merge_passes(passes, (H, W))
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [DetBox(float(b[0]), float(b[1]), float(b[2]), float(b[3]), float(s))
            for b, s in zip(boxes[order], scores[order])]


def format_detections(dets: Sequence[DetBox]) -> str:
    """One `x1 y1 x2 y2 score` line per box, six decimal places."""
    return "\n".join(
        f"{d.x1:.6f} {d.y1:.6f} {d.x2:.6f} {d.y2:.6f} {d.score:.6f}" for d in dets)


def detections_to_json(dets: Sequence[DetBox]) -> list[dict]:
    return [{"x1": d.x1, "y1": d.y1, "x2": d.x2, "y2": d.y2, "score": d.score}
            for d in dets]
