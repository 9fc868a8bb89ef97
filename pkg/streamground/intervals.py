"""
Temporal interval arithmetic.

Frame f occupies the real interval (f-1, f]. An inclusive frame span (s, e)
therefore covers the real interval [s-1, e]; ``iou`` compares real intervals
and ``frame_iou`` compares inclusive frame spans.
"""

from typing import Tuple

Interval = Tuple[float, float]


def to_real(span: Interval) -> Interval:
    """Inclusive frame span -> real interval."""
    return (span[0] - 1.0, float(span[1]))


def to_frames(interval: Interval) -> Interval:
    """Real interval -> inclusive frame span (possibly fractional)."""
    return (interval[0] + 1.0, float(interval[1]))


def iou(pred: Interval, gt: Interval) -> float:
    """Intersection over union of two real intervals."""
    inter = max(0.0, min(pred[1], gt[1]) - max(pred[0], gt[0]))
    union = (pred[1] - pred[0]) + (gt[1] - gt[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def frame_iou(pred: Interval, gt: Interval) -> float:
    """IoU of two inclusive frame spans, e.g. (1, 4) vs (1, 8) -> 0.5."""
    return iou(to_real(pred), to_real(gt))
