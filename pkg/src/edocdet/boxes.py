"""Axis-aligned box helpers shared by decoding, matching, and scoring.

Boxes are [x1, y1, w, h] with a top-left pixel origin.
"""

from __future__ import annotations


def iou(a, b) -> float:
    """Intersection area over union area; 1.0 iff identical, 0.0 iff disjoint."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError(f"degenerate box: {a if aw <= 0 or ah <= 0 else b}")
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def clip_box(box, width: float, height: float):
    """Clip to [0, width] x [0, height]; may produce zero-size boxes."""
    x1, y1, w, h = box
    x2, y2 = x1 + w, y1 + h
    x1, x2 = max(0.0, min(x1, width)), max(0.0, min(x2, width))
    y1, y2 = max(0.0, min(y1, height)), max(0.0, min(y2, height))
    return [x1, y1, x2 - x1, y2 - y1]


def box_area(box) -> float:
    return box[2] * box[3]
