"""
Online streaming engine.

Frames are buffered until a short-term window closes. The window's
proposals are then scored for every query against the current memory
snapshot, predictions are emitted, and only afterwards are the proposals
inserted into memory. Emitted predictions are never revised.

Mode E emits a proposal's regressed interval when the proposal's window
closes. Mode F emits a start as soon as the future branch fires and
completes it with the end of the first later proposal whose interval
contains that start.
"""

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Container
from .config import EngineConfig
from .errors import CheckpointError, MalformedInputError, ShapeError, StreamOrderError
from .intervals import frame_iou, to_frames
from .losses import ProposalScores
from .memory import EventMemory, memory_from_state
from .model import GroundingModel, QueryTask
from .proposals import EventProposal, PendingChildren, TreeState
from .tensor import Tensor, is_grad_enabled, no_grad

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    E = "E"
    F = "F"


@dataclass(frozen=True)
class FeatureFrame:
    frame_index: int
    features: np.ndarray

    @classmethod
    def from_record(cls, record: dict) -> "FeatureFrame":
        try:
            return cls(int(record["frame_index"]), np.asarray(record["features"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInputError(f"bad frame record: {exc}") from exc


@dataclass(frozen=True)
class Prediction:
    """An emitted localization in frame units (start, end inclusive)."""

    query_id: str
    start: float
    end: float
    score: float
    start_emit_time: int
    end_emit_time: int
    mode: Mode

    @property
    def span(self) -> Tuple[float, float]:
        return (self.start, self.end)

    def to_record(self) -> dict:
        record = asdict(self)
        record["mode"] = self.mode.value
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, record: dict) -> "Prediction":
        try:
            return cls(
                query_id=str(record["query_id"]),
                start=float(record["start"]),
                end=float(record["end"]),
                score=float(record["score"]),
                start_emit_time=int(record["start_emit_time"]),
                end_emit_time=int(record["end_emit_time"]),
                mode=Mode(record["mode"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInputError(f"bad prediction record {record!r}: {exc}") from exc


@dataclass
class StartFiring:
    """A future-branch start estimate waiting for a proposal that ends the event."""

    query_id: str
    fired_at: int
    start: float
    score: float


@dataclass
class WindowOutput:
    """Everything one closed window produced."""

    window_end: int
    scores: List[ProposalScores]
    emissions: List[Prediction]
    proposals: List[EventProposal]


@dataclass
class EngineState:
    time: int
    tree: TreeState
    memory: EventMemory
    firings: List[StartFiring] = field(default_factory=list)
    buffer: List[np.ndarray] = field(default_factory=list)
    emitted: int = 0


def _score_candidates(
    scores: ProposalScores, tau_cls: float, window_end: int
) -> List[Prediction]:
    probs = scores.cls_prob.data
    regressed = scores.regressed()
    out = []
    for k in np.flatnonzero(probs >= tau_cls):
        start, end = to_frames((float(regressed[k, 0]), float(regressed[k, 1])))
        out.append(
            Prediction(scores.query_id, start, end, float(probs[k]), window_end, window_end, Mode.E)
        )
    return out


class StreamingEngine:
    """Runs one stream through the model for a fixed set of queries."""

    def __init__(
        self,
        model: GroundingModel,
        queries: Sequence[QueryTask],
        memory: EventMemory,
        config: Optional[EngineConfig] = None,
        training: bool = False,
        use_future: bool = True,
        state: Optional[EngineState] = None,
    ):
        self.model = model
        self.config = config or EngineConfig()
        self.training = training
        self.use_future = use_future
        self.queries = {q.query_id: q for q in queries}
        if len(self.queries) != len(queries):
            raise ShapeError("query ids must be unique within a stream")
        if training:
            self._encoded = {qid: model.encode_query(q.tokens) for qid, q in self.queries.items()}
        else:
            with no_grad():
                self._encoded = {qid: model.encode_query(q.tokens) for qid, q in self.queries.items()}
        self.state = state or EngineState(time=0, tree=model.tree.initial_state(), memory=memory)
        self._emit_modes = {"E": {Mode.E}, "F": {Mode.F}, "both": {Mode.E, Mode.F}}[self.config.mode]
        if not use_future:
            self._emit_modes.discard(Mode.F)

    @property
    def time(self) -> int:
        return self.state.time

    @property
    def memory(self) -> EventMemory:
        return self.state.memory

    def step(self, frame: FeatureFrame) -> List[Prediction]:
        """Buffer one frame; returns the emissions of the window it closes, if any."""
        output = self.push(frame)
        return output.emissions if output is not None else []

    def push(self, frame: FeatureFrame) -> Optional[WindowOutput]:
        if frame.frame_index != self.state.time + 1:
            raise StreamOrderError(f"frame {frame.frame_index} arrived, expected {self.state.time + 1}")
        features = np.asarray(frame.features, dtype=np.float64)
        if features.shape != (self.model.in_dim,):
            raise ShapeError(f"frame {frame.frame_index} has shape {features.shape}, expected ({self.model.in_dim},)")
        self.state.buffer.append(features)
        self.state.time = frame.frame_index
        if len(self.state.buffer) == self.model.window:
            return self.run_window()
        return None

    def run(self, frames: Iterable[FeatureFrame]) -> List[Prediction]:
        emissions: List[Prediction] = []
        for frame in frames:
            emissions.extend(self.step(frame))
        emissions.extend(self.finish())
        return emissions

    def finish(self) -> List[Prediction]:
        """Flush a trailing partial window at stream end."""
        if not self.state.buffer:
            return []
        return self.run_window(final=True).emissions

    def run_window(self, final: bool = False) -> WindowOutput:
        if self.training or not is_grad_enabled():
            return self._run_window(final)
        with no_grad():
            return self._run_window(final)

    def _run_window(self, final: bool) -> WindowOutput:
        state = self.state
        frames = np.stack(state.buffer)
        first = state.time - frames.shape[0] + 1
        batch, state.tree = self.model.tree.ingest_window(
            frames,
            state.tree,
            first_frame=first,
            final=final,
            horizon_start=state.memory.horizon(first),
            detach_carry=True,
        )
        state.buffer = []
        now = batch.last_frame
        proposals = batch.all_proposals()
        snapshot = state.memory.snapshot()
        scores = self.model.score_window(proposals, snapshot, self._encoded, now)

        emissions = self._emit(scores, now)

        for event in proposals:
            state.memory.insert(event.scale, event.detached())
        state.emitted += len(emissions)
        return WindowOutput(now, scores, emissions, proposals)

    def _emit(self, scores: List[ProposalScores], now: int) -> List[Prediction]:
        cfg = self.config
        emissions: List[Prediction] = []
        candidates_by_query = {s.query_id: _score_candidates(s, cfg.tau_cls, now) for s in scores}

        # pair waiting starts with this window's candidates before new starts fire
        still_waiting: List[StartFiring] = []
        paired: Dict[str, List[Prediction]] = {}
        for firing in self.state.firings:
            if now > firing.fired_at + cfg.horizon:
                logger.debug("start firing for %s at t=%d expired", firing.query_id, firing.fired_at)
                continue
            match = pair_future_with_proposal(firing, candidates_by_query.get(firing.query_id, []), cfg)
            if match is None:
                still_waiting.append(firing)
            else:
                paired.setdefault(firing.query_id, []).append(match)
        self.state.firings = still_waiting

        for s in scores:
            if Mode.E in self._emit_modes:
                emissions.extend(candidates_by_query[s.query_id])
            if Mode.F in self._emit_modes:
                emissions.extend(paired.get(s.query_id, []))
            if self.use_future:
                prob = float(s.future_prob.data)
                if prob >= cfg.tau_f:
                    start = now + float(s.future_offset.data)
                    self.state.firings.append(StartFiring(s.query_id, now, start, prob))
        return emissions

    def finalize(self, emissions: Sequence[Prediction], n: Optional[int] = None) -> Dict[str, List[Prediction]]:
        ranked = finalize_predictions(emissions, n or self.config.top_n, self.config.nms_iou)
        for qid in self.queries:
            ranked.setdefault(qid, [])
        return ranked

    def suspend(self) -> Container:
        """Serialize the stream state so a later engine can continue it."""
        if self.state.buffer:
            raise CheckpointError("suspend only at window boundaries (buffer is not empty)")
        tree = self.state.tree
        arrays = {"tree/history": tree.history.copy()}
        pending_meta = []
        for scale, event in sorted(tree.pending.slots.items()):
            arrays[f"pending/{scale}"] = event.feature.data.copy()
            pending_meta.append([event.scale, event.index, event.start_frame, event.end_frame, event.completed_at])
        arrays.update(self.state.memory.state_arrays())
        metadata = {
            "time": self.state.time,
            "tree": {"next_frame": tree.next_frame, "windows_seen": tree.windows_seen, "finished": tree.finished},
            "pending": pending_meta,
            "memory": self.state.memory.state_metadata(),
            "firings": [asdict(f) for f in self.state.firings],
            "emitted": self.state.emitted,
            "queries": sorted(self.queries),
        }
        return Container(kind="engine-state", tensors=arrays, metadata=metadata)

    @classmethod
    def resume(
        cls,
        model: GroundingModel,
        queries: Sequence[QueryTask],
        container: Container,
        config: Optional[EngineConfig] = None,
        use_future: bool = True,
    ) -> "StreamingEngine":
        if container.kind != "engine-state":
            raise CheckpointError(f"expected an engine-state container, got {container.kind!r}")
        meta = container.metadata
        if sorted(q.query_id for q in queries) != meta.get("queries"):
            raise CheckpointError("queries differ from the suspended stream")
        pending = PendingChildren()
        for scale, index, start, end, completed_at in meta["pending"]:
            feature = Tensor(container.tensors[f"pending/{scale}"])
            pending.put(EventProposal(scale, index, start, end, feature, completed_at))
        tree = TreeState(
            next_frame=int(meta["tree"]["next_frame"]),
            windows_seen=int(meta["tree"]["windows_seen"]),
            history=np.asarray(container.tensors["tree/history"]).reshape(-1, model.in_dim),
            pending=pending,
            finished=bool(meta["tree"]["finished"]),
        )
        memory = memory_from_state(meta["memory"], container.tensors)
        state = EngineState(
            time=int(meta["time"]),
            tree=tree,
            memory=memory,
            firings=[StartFiring(**f) for f in meta["firings"]],
            emitted=int(meta["emitted"]),
        )
        return cls(model, queries, memory, config, use_future=use_future, state=state)


def pair_future_with_proposal(
    firing: StartFiring, candidates: Sequence[Prediction], config: EngineConfig
) -> Optional[Prediction]:
    """
    Complete a start firing with the best later candidate containing its start.

    Candidates must come from a window after the firing and end within the
    pairing horizon. The pair keeps the firing's start and emit time and
    takes the candidate's end; its score is the geometric mean of both.
    """
    best: Optional[Prediction] = None
    tol = config.pair_tolerance
    for cand in candidates:
        if cand.end_emit_time <= firing.fired_at or cand.end_emit_time > firing.fired_at + config.horizon:
            continue
        if not cand.start - tol <= firing.start <= cand.end + tol:
            continue
        if best is None or cand.score > best.score:
            best = cand
    if best is None:
        return None
    end = max(best.end, firing.start)
    return Prediction(
        query_id=firing.query_id,
        start=firing.start,
        end=end,
        score=math.sqrt(firing.score * best.score),
        start_emit_time=firing.fired_at,
        end_emit_time=best.end_emit_time,
        mode=Mode.F,
    )


def finalize_predictions(
    candidates: Iterable[Prediction], n: int, nms_iou: float
) -> Dict[str, List[Prediction]]:
    """Per query: sort by score, greedy temporal NMS at IoU >= nms_iou, keep the top n."""
    by_query: Dict[str, List[Prediction]] = {}
    for cand in candidates:
        by_query.setdefault(cand.query_id, []).append(cand)
    ranked: Dict[str, List[Prediction]] = {}
    for qid, cands in by_query.items():
        ordered = sorted(cands, key=lambda p: (-p.score, p.end_emit_time, p.start, p.end))
        kept: List[Prediction] = []
        for cand in ordered:
            if all(frame_iou(cand.span, k.span) < nms_iou for k in kept):
                kept.append(cand)
                if len(kept) == n:
                    break
        ranked[qid] = kept
    return ranked


def frames_from_array(frames: np.ndarray) -> List[FeatureFrame]:
    return [FeatureFrame(t, row) for t, row in enumerate(frames, start=1)]
