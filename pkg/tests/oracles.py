"""Brute-force reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np

from gdifd.detector.targets import LEVEL_RANGES


def loop_conv(x, w, b, stride=1, padding=0):
    """Direct cross-correlation, one output element at a time."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for j in range(o):
            for r in range(oh):
                for s in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * w[j, ch, u, v]
                    out[i, j, r, s] = acc + b[j]
    return out


def brute_assign(boxes, classes, level, h, w):
    """Per-cell loop over boxes; smallest area wins, first index on ties."""
    s = 2**level
    lo, hi = LEVEL_RANGES[level]
    cls = -np.ones((h, w), dtype=int)
    ltrb = np.zeros((h, w, 4))
    ctr = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            x, y = s / 2 + j * s, s / 2 + i * s
            best = None
            for g, (x1, y1, x2, y2) in enumerate(boxes):
                l, t, r, b = x - x1, y - y1, x2 - x, y2 - y
                if min(l, t, r, b) <= 0 or not lo < max(l, t, r, b) <= hi:
                    continue
                area = (x2 - x1) * (y2 - y1)
                if best is None or area < best[0]:
                    best = (area, g, (l, t, r, b))
            if best is not None:
                _, g, (l, t, r, b) = best
                cls[i, j] = classes[g]
                ltrb[i, j] = (l, t, r, b)
                ctr[i, j] = math.sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b))
    return cls, ltrb, ctr


def pair_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_nms(boxes, scores, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(pair_iou(boxes[i], boxes[k]) <= thr for k in kept):
            kept.append(i)
    return kept
