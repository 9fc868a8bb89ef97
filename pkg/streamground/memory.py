"""
Bounded event memories.

``HierarchicalMemory`` keeps one ordered store per scale with capacities
allocated from how often each scale matches ground truth. On overflow the
most similar adjacent pair above ``delta`` is average-merged; without such a
pair the oldest event is evicted. ``FrameFifoMemory`` is the frame-level
baseline that keeps only the latest K scale-1 events.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CapacityError, CheckpointError, DomainError, StreamOrderError
from .intervals import frame_iou
from .proposals import EventProposal, span_of
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleWeights:
    """Non-negative per-scale frequencies of positive events."""

    values: Tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise DomainError("scale weights need at least one scale")
        if any(not math.isfinite(w) or w < 0 for w in self.values):
            raise DomainError(f"scale weights must be finite and non-negative: {self.values}")

    @classmethod
    def uniform(cls, num_scales: int) -> "ScaleWeights":
        return cls(tuple(1.0 for _ in range(num_scales)))

    @property
    def num_scales(self) -> int:
        return len(self.values)

    def to_list(self) -> List[float]:
        return list(self.values)


def allocate_sizes(total: int, weights: Union[ScaleWeights, Sequence[float]]) -> List[int]:
    """
    Split ``total`` slots over the scales: K_i = 1 + (K - L) * w_i / sum(w).

    Real shares are floored and the leftover units go to the largest
    fractional remainders, ties to the lower scale. All-zero weights
    allocate uniformly.
    """
    values = weights.values if isinstance(weights, ScaleWeights) else tuple(weights)
    num_scales = len(values)
    if num_scales < 1:
        raise DomainError("need at least one scale")
    if total < num_scales:
        raise CapacityError(f"memory size {total} cannot give {num_scales} scales one slot each")
    exact = [Fraction(w) for w in values]
    if any(w < 0 for w in exact):
        raise DomainError(f"negative scale weight in {values}")
    norm = sum(exact)
    if norm == 0:
        exact = [Fraction(1)] * num_scales
        norm = Fraction(num_scales)

    spare = total - num_scales
    shares = [spare * w / norm for w in exact]
    sizes = [1 + math.floor(s) for s in shares]
    leftover = total - sum(sizes)
    order = sorted(range(num_scales), key=lambda i: (-(shares[i] - math.floor(shares[i])), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def estimate_scale_weights(
    intervals: Sequence[Tuple[int, int]], num_scales: int, iou_threshold: float
) -> ScaleWeights:
    """Count (ground truth, aligned span) pairs with IoU >= threshold at every scale."""
    if not intervals:
        raise DomainError("cannot estimate scale weights from an empty annotation set")
    if not 0.0 < iou_threshold <= 1.0:
        raise DomainError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    counts = [0] * num_scales
    for start, end in intervals:
        for scale in range(1, num_scales + 1):
            width = 1 << (scale - 1)
            # only spans overlapping [start, end] can clear a positive threshold
            for index in range((start - 1) // width + 1, (end - 1) // width + 2):
                if frame_iou(span_of(scale, index), (start, end)) >= iou_threshold:
                    counts[scale - 1] += 1
    if not any(counts):
        logger.info("no ground truth clears IoU %.2f at any scale; using uniform weights", iou_threshold)
        return ScaleWeights.uniform(num_scales)
    return ScaleWeights(tuple(float(c) for c in counts))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def merge_events(older: EventProposal, newer: EventProposal) -> EventProposal:
    """Average two adjacent events into one covering both spans."""
    return EventProposal(
        scale=newer.scale,
        index=newer.index,
        start_frame=older.start_frame,
        end_frame=newer.end_frame,
        feature=(older.feature + newer.feature) * 0.5,
        completed_at=newer.completed_at,
        members=older.members + newer.members,
    )


def _events_to_arrays(prefix: str, events: Sequence[EventProposal]) -> Dict[str, np.ndarray]:
    if not events:
        return {}
    return {
        f"{prefix}/features": np.stack([e.feature.data for e in events]),
        f"{prefix}/meta": np.array(
            [[e.scale, e.index, e.start_frame, e.end_frame, e.completed_at, e.members] for e in events],
            dtype=np.float64,
        ),
    }


def _events_from_arrays(prefix: str, arrays: Dict[str, np.ndarray]) -> List[EventProposal]:
    if f"{prefix}/meta" not in arrays:
        return []
    features = arrays[f"{prefix}/features"]
    return [
        EventProposal(
            int(m[0]), int(m[1]), int(m[2]), int(m[3]), Tensor(features[k]), int(m[4]), int(m[5])
        )
        for k, m in enumerate(arrays[f"{prefix}/meta"])
    ]


class HierarchicalMemory:
    """Per-scale ordered event stores with capacities K_1..K_L."""

    kind = "hierarchical"

    def __init__(self, capacities: Sequence[int], delta: float = 0.8):
        if not capacities or any(c < 1 for c in capacities):
            raise CapacityError(f"every scale needs capacity >= 1, got {list(capacities)}")
        self.capacities = [int(c) for c in capacities]
        self.delta = float(delta)
        self._stores: List[List[EventProposal]] = [[] for _ in self.capacities]
        self.merges = 0
        self.evictions = 0

    @classmethod
    def allocate(
        cls,
        total: int,
        weights: Union[ScaleWeights, Sequence[float]],
        delta: float = 0.8,
    ) -> "HierarchicalMemory":
        return cls(allocate_sizes(total, weights), delta)

    @property
    def num_scales(self) -> int:
        return len(self.capacities)

    @property
    def total_capacity(self) -> int:
        return sum(self.capacities)

    def __len__(self) -> int:
        return sum(len(s) for s in self._stores)

    def sizes(self) -> List[int]:
        return [len(s) for s in self._stores]

    def store(self, scale: int) -> Tuple[EventProposal, ...]:
        if not 1 <= scale <= self.num_scales:
            raise DomainError(f"scale {scale} outside [1, {self.num_scales}]")
        return tuple(self._stores[scale - 1])

    def horizon(self, first_frame: int) -> Optional[int]:
        """Earliest frame a new parent may start at; unrestricted here."""
        return None

    def insert(self, scale: int, event: EventProposal) -> None:
        store = self._stores[scale - 1] if 1 <= scale <= self.num_scales else None
        if store is None:
            raise DomainError(f"scale {scale} outside [1, {self.num_scales}]")
        if store and event.end_frame <= store[-1].end_frame:
            raise StreamOrderError(
                f"scale {scale}: event ending at {event.end_frame} does not follow "
                f"stored event ending at {store[-1].end_frame}"
            )
        store.append(event)
        capacity = self.capacities[scale - 1]
        while len(store) > capacity:
            sims = [
                _cosine(store[k].feature.data, store[k + 1].feature.data)
                for k in range(len(store) - 1)
            ]
            best = int(np.argmax(sims))
            if sims[best] > self.delta:
                store[best : best + 2] = [merge_events(store[best], store[best + 1])]
                self.merges += 1
            else:
                store.pop(0)
                self.evictions += 1

    def snapshot(self) -> Tuple[EventProposal, ...]:
        """All stored events ordered by (end_frame, scale)."""
        events = [e for s in self._stores for e in s]
        return tuple(sorted(events, key=lambda e: (e.end_frame, e.scale)))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for j, store in enumerate(self._stores, start=1):
            arrays.update(_events_to_arrays(f"memory/{j}", store))
        return arrays

    def state_metadata(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "capacities": self.capacities,
            "delta": self.delta if math.isfinite(self.delta) else "inf",
            "merges": self.merges,
            "evictions": self.evictions,
        }

    @classmethod
    def from_state(cls, metadata: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> "HierarchicalMemory":
        if metadata.get("kind") != cls.kind:
            raise CheckpointError(f"expected {cls.kind} memory state, got {metadata.get('kind')}")
        memory = cls(metadata["capacities"], float(metadata["delta"]))
        for j in range(1, memory.num_scales + 1):
            memory._stores[j - 1] = _events_from_arrays(f"memory/{j}", arrays)
        memory.merges = int(metadata.get("merges", 0))
        memory.evictions = int(metadata.get("evictions", 0))
        return memory


class FrameFifoMemory:
    """The latest K frame-level (scale-1) events; coarser events are not kept."""

    kind = "frame_fifo"

    def __init__(self, capacity: int):
        if capacity < 1:
            raise CapacityError(f"frame memory needs capacity >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._frames: Deque[EventProposal] = deque(maxlen=self.capacity)
        self.evictions = 0

    @property
    def capacities(self) -> List[int]:
        return [self.capacity]

    @property
    def total_capacity(self) -> int:
        return self.capacity

    def __len__(self) -> int:
        return len(self._frames)

    def sizes(self) -> List[int]:
        return [len(self._frames)]

    def horizon(self, first_frame: int) -> int:
        """Frames before this one have left the FIFO when the window starting at ``first_frame`` runs."""
        return first_frame - self.capacity

    def insert(self, scale: int, event: EventProposal) -> None:
        if scale != 1:
            return
        if self._frames and event.end_frame <= self._frames[-1].end_frame:
            raise StreamOrderError(
                f"frame {event.end_frame} does not follow stored frame {self._frames[-1].end_frame}"
            )
        if len(self._frames) == self.capacity:
            self.evictions += 1
        self._frames.append(event)

    def snapshot(self) -> Tuple[EventProposal, ...]:
        return tuple(self._frames)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return _events_to_arrays("memory/1", list(self._frames))

    def state_metadata(self) -> Dict[str, Any]:
        return {"kind": self.kind, "capacity": self.capacity, "evictions": self.evictions}

    @classmethod
    def from_state(cls, metadata: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> "FrameFifoMemory":
        if metadata.get("kind") != cls.kind:
            raise CheckpointError(f"expected {cls.kind} memory state, got {metadata.get('kind')}")
        memory = cls(int(metadata["capacity"]))
        memory._frames.extend(_events_from_arrays("memory/1", arrays))
        memory.evictions = int(metadata.get("evictions", 0))
        return memory


EventMemory = Union[HierarchicalMemory, FrameFifoMemory]


def memory_from_state(metadata: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> EventMemory:
    kind = metadata.get("kind")
    if kind == HierarchicalMemory.kind:
        return HierarchicalMemory.from_state(metadata, arrays)
    if kind == FrameFifoMemory.kind:
        return FrameFifoMemory.from_state(metadata, arrays)
    raise CheckpointError(f"unknown memory kind '{kind}'")
