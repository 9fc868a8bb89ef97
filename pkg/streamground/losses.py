"""
Label assignment and training losses.

The training objective is the unit-weight sum of a focal classification
loss over all proposals, a 1-D DIoU regression loss over positive
proposals, and the future-start term (focal on the window-level start
probability plus L1 on the start offset of positive windows).
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError
from .intervals import frame_iou
from .tensor import Tensor, TensorLike, as_tensor, concat, maximum, minimum, stack

PROB_CLAMP = 1e-7


def focal_loss(
    prob: TensorLike, label: TensorLike, alpha: float = 0.25, gamma: float = 2.0
) -> Tensor:
    """Element-wise focal loss of probabilities against {0, 1} labels."""
    c = as_tensor(prob).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if y.shape != c.shape:
        raise ShapeError(f"labels of shape {y.shape} do not match probabilities {c.shape}")
    positive = (1.0 - c) ** gamma * c.log() * (-alpha)
    negative = c**gamma * (1.0 - c).log() * (-(1.0 - alpha))
    return positive * y + negative * (1.0 - y)


def diou_loss_1d(pred: TensorLike, gt: TensorLike) -> Tensor:
    """
    1 - IoU + (center distance / enclosing length)^2 for real intervals.

    ``pred`` and ``gt`` have shape (..., 2) holding (start, end). Predicted
    intervals shorter than one frame are stretched to one frame.
    """
    p, g = as_tensor(pred), as_tensor(gt)
    if p.shape != g.shape or p.shape[-1:] != (2,):
        raise ShapeError(f"DIoU needs matching (..., 2) intervals, got {p.shape} and {g.shape}")
    ps, pe = p[..., 0], p[..., 1]
    pe = maximum(pe, ps + 1.0)
    gs, ge = g[..., 0], g[..., 1]
    inter = (minimum(pe, ge) - maximum(ps, gs)).clamp(0.0)
    union = (pe - ps) + (ge - gs) - inter
    enclosing = maximum(pe, ge) - minimum(ps, gs)
    center_gap = (ps + pe) * 0.5 - (gs + ge) * 0.5
    return 1.0 - inter / union + center_gap * center_gap / (enclosing * enclosing)


@dataclass
class LabelAssignment:
    """Per-proposal labels plus the window-level future-start label."""

    proposal_labels: np.ndarray
    future_label: int

    @property
    def num_positive(self) -> int:
        return int(self.proposal_labels.sum())


def assign_labels(
    spans: Sequence[Tuple[int, int]],
    gt: Tuple[int, int],
    theta_pos: float,
    window_end: int,
    a: int,
    b: int,
) -> LabelAssignment:
    """Positive iff IoU(span, gt) >= theta_pos; future positive iff t+a <= s <= t+b."""
    start, end = gt
    if not 1 <= start <= end:
        raise DomainError(f"invalid ground truth interval ({start}, {end})")
    if a > b:
        raise DomainError(f"future window ({a}, {b}) is empty")
    labels = np.array([1.0 if frame_iou(span, gt) >= theta_pos else 0.0 for span in spans])
    future = int(window_end + a <= start <= window_end + b)
    return LabelAssignment(labels, future)


@dataclass
class ProposalScores:
    """Head outputs for one query over the proposals of one window."""

    query_id: str
    window_end: int
    spans: np.ndarray
    cls_prob: Tensor
    offsets: Tensor
    future_prob: Tensor
    future_offset: Tensor

    def __len__(self) -> int:
        return self.spans.shape[0]

    def regressed(self) -> np.ndarray:
        """Regressed real intervals (n, 2), at least one frame long."""
        real = np.stack([self.spans[:, 0] - 1.0, self.spans[:, 1].astype(np.float64)], axis=1)
        out = real + self.offsets.data
        out[:, 1] = np.maximum(out[:, 1], out[:, 0] + 1.0)
        return out

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.cls_prob.data))
            and np.all(np.isfinite(self.offsets.data))
            and np.all(np.isfinite(self.future_prob.data))
            and np.all(np.isfinite(self.future_offset.data))
        )


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    reg: float
    future: float
    num_proposals: int
    num_positive: int
    num_future_positive: int

    def as_dict(self) -> dict:
        return {
            "loss": self.total.item(),
            "cls": self.cls,
            "reg": self.reg,
            "future": self.future,
        }


def total_loss(
    scores: Sequence[ProposalScores],
    labels: Sequence[LabelAssignment],
    gts: Sequence[Tuple[int, int]],
    alpha: float = 0.25,
    gamma: float = 2.0,
    use_future: bool = True,
) -> LossBreakdown:
    """Sum of the classification, regression and future terms over a set of windows."""
    if not (len(scores) == len(labels) == len(gts)):
        raise ShapeError("scores, labels and ground truths must align one to one")
    if not scores:
        raise DomainError("total_loss needs at least one scored window")

    probs = concat([s.cls_prob for s in scores], axis=0)
    targets = np.concatenate([lab.proposal_labels for lab in labels])
    cls = focal_loss(probs, targets, alpha, gamma).mean()

    pred_rows: List[Tensor] = []
    gt_rows: List[np.ndarray] = []
    for score, lab, (s, e) in zip(scores, labels, gts):
        positive = np.flatnonzero(lab.proposal_labels)
        if positive.size == 0:
            continue
        spans = score.spans[positive]
        real = np.stack([spans[:, 0] - 1.0, spans[:, 1].astype(np.float64)], axis=1)
        pred_rows.append(score.offsets[positive] + real)
        gt_rows.append(np.tile([s - 1.0, float(e)], (positive.size, 1)))
    if pred_rows:
        reg = diou_loss_1d(concat(pred_rows, axis=0), np.concatenate(gt_rows)).mean()
    else:
        reg = Tensor(0.0)

    future: Optional[Tensor] = None
    num_future_positive = 0
    if use_future:
        fprobs = stack([s.future_prob.reshape(()) for s in scores])
        ftargets = np.array([lab.future_label for lab in labels], dtype=np.float64)
        future = focal_loss(fprobs, ftargets, alpha, gamma).mean()
        positive = [
            (score.future_offset.reshape(()) - float(s - score.window_end)).abs()
            for score, lab, (s, _) in zip(scores, labels, gts)
            if lab.future_label
        ]
        num_future_positive = len(positive)
        if positive:
            future = future + stack(positive).mean()

    total = cls + reg
    if future is not None:
        total = total + future
    return LossBreakdown(
        total=total,
        cls=cls.item(),
        reg=reg.item(),
        future=future.item() if future is not None else 0.0,
        num_proposals=int(targets.size),
        num_positive=int(targets.sum()),
        num_future_positive=num_future_positive,
    )
