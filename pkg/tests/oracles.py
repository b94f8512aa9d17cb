"""Independent reference implementations used to compute expected values.

Everything here is deliberately naive (scalar loops, full pairwise
matrices) and shares no code with the engine's execution paths.
"""

from __future__ import annotations

import numpy as np


def conv2d_scalar(x, kernel, bias, stride, padding, groups=1):
    """Direct convolution sum via nested scalar loops."""
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = kernel.shape
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    ocg = cout // groups
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    for b in range(n):
        for oc in range(cout):
            g = oc // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (kernel[oc, ic, u, v]
                                        * xp[b, g * cin_g + ic, i * sh + u, j * sw + v])
                    out[b, oc, i, j] = acc + (bias[oc] if bias is not None else 0.0)
    return out.astype(np.float32)


def maxpool_scalar(x, kernel, stride, padding):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                constant_values=-np.inf)
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[b, ch, i, j] = xp[b, ch, i * sh : i * sh + kh,
                                          j * sw : j * sw + kw].max()
    return out.astype(np.float32)


def upsample2x_scalar(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, :, i, j] = x[:, :, i // 2, j // 2]
    return out


def iou_pair(a, b):
    """IoU of two (x1, y1, x2, y2) boxes, written independently."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def nms_reference(boxes, scores, threshold):
    """O(n^2) keep-list NMS: walk boxes in (score desc, index asc) order and
    keep each one whose IoU with every kept box stays below the threshold."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou_pair(boxes[i], boxes[k]) < threshold for k in kept):
            kept.append(i)
    return kept


def nms_reference_matrix(boxes, scores, threshold):
    """Same keep-list algorithm over a precomputed pairwise IoU table, fast
    enough for thousands of instances."""
    b = np.asarray(boxes, dtype=np.float64)
    n = len(b)
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    iw = np.clip(np.minimum(x2[:, None], x2[None, :])
                 - np.maximum(x1[:, None], x1[None, :]), 0, None)
    ih = np.clip(np.minimum(y2[:, None], y2[None, :])
                 - np.maximum(y1[:, None], y1[None, :]), 0, None)
    inter = iw * ih
    area = (x2 - x1) * (y2 - y1)
    union = area[:, None] + area[None, :] - inter
    table = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(table[i, k] < threshold for k in kept):
            kept.append(i)
    return kept


def relative_error(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.abs(want).max(), 1e-12)
    return float(np.abs(got - want).max() / denom)
