"""
Streaming segment-tree event proposals.

Scale 1 holds one proposal per frame. A scale-(j+1) proposal is formed as
soon as both of its scale-j children exist; a left child whose right sibling
has not arrived yet waits in a per-scale pending slot, so parents can span
window boundaries.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DomainError, ShapeError, StreamOrderError
from .nn import MLP, CausalConv1d, Module
from .tensor import Tensor, TensorLike, as_tensor, concat

logger = logging.getLogger(__name__)


def span_of(scale: int, index: int, num_scales: Optional[int] = None) -> Tuple[int, int]:
    """Inclusive frame span of proposal ``index`` at ``scale`` (both 1-based)."""
    if scale < 1 or (num_scales is not None and scale > num_scales):
        raise DomainError(f"scale {scale} outside [1, {num_scales if num_scales else 'L'}]")
    if index < 1:
        raise DomainError(f"proposal index must be >= 1, got {index}")
    width = 1 << (scale - 1)
    return ((index - 1) * width + 1, index * width)


def max_reach(num_scales: int, per_scale_min: int = 1) -> int:
    """Longest proposal duration a memory holding >= per_scale_min events per scale supports."""
    if num_scales < 1:
        raise DomainError(f"number of scales must be >= 1, got {num_scales}")
    if per_scale_min < 1:
        raise DomainError("every scale must retain at least one event")
    return 1 << (num_scales - 1)


@dataclass(frozen=True, eq=False)
class EventProposal:
    """A candidate event: aligned tree node, or the union of merged memory entries."""

    scale: int
    index: int
    start_frame: int
    end_frame: int
    feature: Tensor
    completed_at: int
    members: int = 1

    @property
    def span(self) -> Tuple[int, int]:
        return (self.start_frame, self.end_frame)

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame + 1

    @property
    def center(self) -> float:
        """Center of the covered real interval [start-1, end]."""
        return (self.start_frame - 1 + self.end_frame) / 2.0

    def detached(self) -> "EventProposal":
        return EventProposal(
            self.scale,
            self.index,
            self.start_frame,
            self.end_frame,
            self.feature.detach(),
            self.completed_at,
            self.members,
        )


@dataclass
class PendingChildren:
    """The newest unpaired left child at each scale."""

    slots: Dict[int, EventProposal] = field(default_factory=dict)

    def get(self, scale: int) -> Optional[EventProposal]:
        return self.slots.get(scale)

    def put(self, event: EventProposal) -> None:
        if event.index % 2 != 1:
            raise DomainError(f"only left children (odd index) can wait, got index {event.index}")
        self.slots[event.scale] = event

    def pop(self, scale: int) -> Optional[EventProposal]:
        return self.slots.pop(scale, None)

    def __len__(self) -> int:
        return len(self.slots)


@dataclass
class WindowBatch:
    """Frames of one short-term window and the proposals that completed in it."""

    ordinal: int
    first_frame: int
    last_frame: int
    frames: np.ndarray
    proposals: Dict[int, List[EventProposal]]

    def counts(self, num_scales: int) -> List[int]:
        return [len(self.proposals.get(j, [])) for j in range(1, num_scales + 1)]

    def all_proposals(self) -> List[EventProposal]:
        """All new proposals ordered by (scale, index)."""
        return [p for j in sorted(self.proposals) for p in self.proposals[j]]


@dataclass
class TreeState:
    """Per-stream state of the proposal tree."""

    next_frame: int
    windows_seen: int
    history: np.ndarray
    pending: PendingChildren = field(default_factory=PendingChildren)
    finished: bool = False


class ProposalTree(Module):
    """Causal conv for scale-1 features plus one merge MLP per scale transition."""

    def __init__(
        self,
        in_dim: int,
        dim: int,
        window: int,
        num_scales: int,
        kernel: int,
        hidden: int,
        rng: np.random.Generator,
    ):
        if window < 1 or window & (window - 1):
            raise DomainError(f"window length must be a power of two, got {window}")
        if num_scales < int(math.log2(window)) + 1:
            raise DomainError(
                f"{num_scales} scales cannot cover a window of {window} frames "
                f"(need >= {int(math.log2(window)) + 1})"
            )
        self.in_dim = in_dim
        self.dim = dim
        self.window = window
        self.num_scales = num_scales
        self.conv = CausalConv1d(in_dim, dim, kernel, rng)
        self.merges = [MLP(2 * dim, hidden, dim, rng) for _ in range(num_scales - 1)]

    def initial_state(self) -> TreeState:
        return TreeState(next_frame=1, windows_seen=0, history=self.conv.initial_history())

    def ingest_window(
        self,
        frames: TensorLike,
        state: TreeState,
        first_frame: Optional[int] = None,
        final: bool = False,
        horizon_start: Optional[int] = None,
        detach_carry: bool = True,
    ) -> Tuple[WindowBatch, TreeState]:
        """
        Build all proposals that complete within one window.

        ``final`` allows a shorter last window at stream end. A pending left
        child starting before ``horizon_start`` is no longer visible and is
        dropped instead of merged (frame-FIFO memory). With ``detach_carry``
        the left children kept for later windows are cut from the graph.
        """
        x = as_tensor(frames)
        if state.finished:
            raise StreamOrderError("stream already finished; no more windows accepted")
        if first_frame is not None and first_frame != state.next_frame:
            raise StreamOrderError(
                f"window starts at frame {first_frame}, expected {state.next_frame}"
            )
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected frames of shape (n, {self.in_dim}), got {x.shape}")
        n = x.shape[0]
        if n != self.window and not (final and 0 < n < self.window):
            raise ShapeError(f"window holds {n} frames, expected {self.window}")

        first = state.next_frame
        last = first + n - 1
        completed_at = last
        ordinal = state.windows_seen + 1

        level = self.conv(x, state.history)
        by_scale: Dict[int, List[EventProposal]] = {
            1: [
                EventProposal(1, first + r, first + r, first + r, level[r], completed_at)
                for r in range(n)
            ]
        }

        pending = PendingChildren(dict(state.pending.slots))
        for j in range(1, self.num_scales):
            lefts, rights = [], []
            left = pending.pop(j)
            for event in by_scale.get(j, []):
                if event.index % 2 == 1:
                    left = event
                    continue
                if left is not None and left.index == event.index - 1:
                    if horizon_start is None or left.start_frame >= horizon_start:
                        lefts.append(left)
                        rights.append(event)
                left = None
            if left is not None:
                if detach_carry and left.completed_at == completed_at:
                    left = left.detached()
                pending.put(left)
            if not lefts:
                continue
            merged = self.merges[j - 1](
                concat(
                    [
                        concat([p.feature.reshape(1, -1) for p in lefts], axis=0),
                        concat([p.feature.reshape(1, -1) for p in rights], axis=0),
                    ],
                    axis=1,
                )
            )
            parents = []
            for row, rc in enumerate(rights):
                index = rc.index // 2
                start, end = span_of(j + 1, index)
                parents.append(EventProposal(j + 1, index, start, end, merged[row], completed_at))
            by_scale[j + 1] = parents

        window_rows = np.asarray(x.data)
        combined = np.concatenate([state.history, window_rows], axis=0)
        keep = state.history.shape[0]
        history = combined[combined.shape[0] - keep :] if keep else state.history

        batch = WindowBatch(ordinal, first, last, window_rows, by_scale)
        new_state = TreeState(
            next_frame=last + 1,
            windows_seen=ordinal,
            history=history.copy(),
            pending=pending,
            finished=final,
        )
        logger.debug("window %d (%d-%d): counts %s", ordinal, first, last, batch.counts(self.num_scales))
        return batch, new_state
