"""Axis-aligned (x1, y1, x2, y2) box helpers shared by detector and evalkit."""

from __future__ import annotations


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for empty overlap or boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def clip_box(box, size: float):
    x1, y1, x2, y2 = box
    return (
        min(max(x1, 0.0), size),
        min(max(y1, 0.0), size),
        min(max(x2, 0.0), size),
        min(max(y2, 0.0), size),
    )
