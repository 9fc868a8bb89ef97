"""
Deterministic synthetic streams with planted events and token queries.

Background frames are Gaussian noise; event frames are a per-type prototype
plus the same noise. Queries name an event type and an ordinal: "first"
asks for the type's first occurrence, "second" for a later repeat at least
``ordinal_gap_min`` frames after the first one ends.
"""

import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import DataConfig
from .errors import GenerationError, MalformedInputError, SpecError, VocabularyError
from .model import QueryTask

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
_SPLIT_CODES = {"train": 0, "test": 1}


@dataclass(frozen=True)
class Vocabulary:
    """``<pad>``, one token per event type, then the two ordinal tokens."""

    event_types: int

    @property
    def tokens(self) -> List[str]:
        return ["<pad>"] + [f"event_{k}" for k in range(self.event_types)] + ["first", "second"]

    def __len__(self) -> int:
        return self.event_types + 3

    def event_token(self, event_type: int) -> int:
        return 1 + event_type

    def ordinal_token(self, ordinal: str) -> int:
        if ordinal == "first":
            return self.event_types + 1
        if ordinal == "second":
            return self.event_types + 2
        raise GenerationError(f"unknown ordinal {ordinal!r}")

    def encode(self, words: Sequence[str]) -> Tuple[int, ...]:
        lookup = {w: i for i, w in enumerate(self.tokens)}
        try:
            return tuple(lookup[w] for w in words)
        except KeyError as exc:
            raise VocabularyError(f"word {exc.args[0]!r} not in vocabulary") from exc


@dataclass(frozen=True)
class PlantedEvent:
    event_type: int
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class Annotation:
    query_id: str
    stream_id: str
    tokens: Tuple[int, ...]
    gt: Tuple[int, int]
    ordinal: str
    event_type: int

    @property
    def subset(self) -> str:
        return "again" if self.ordinal == "second" else "first"

    def to_task(self) -> QueryTask:
        return QueryTask(self.query_id, self.tokens, self.gt, self.subset)

    def to_record(self) -> dict:
        record = asdict(self)
        record["tokens"] = list(self.tokens)
        record["gt"] = list(self.gt)
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Annotation":
        try:
            return cls(
                query_id=str(record["query_id"]),
                stream_id=str(record["stream_id"]),
                tokens=tuple(int(t) for t in record["tokens"]),
                gt=(int(record["gt"][0]), int(record["gt"][1])),
                ordinal=str(record["ordinal"]),
                event_type=int(record["event_type"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise MalformedInputError(f"bad annotation record {record!r}: {exc}") from exc


@dataclass(frozen=True)
class StreamSpec:
    length: int = 512
    feature_dim: int = 32
    event_types: int = 5
    noise: float = 0.3
    duration_min: int = 2
    duration_max: int = 128
    gap_min: int = 8
    gap_max: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.length < 8:
            raise SpecError(f"stream length {self.length} is shorter than a window")
        if self.feature_dim < 4:
            raise SpecError(f"feature dimension must be >= 4, got {self.feature_dim}")
        if not 1 <= self.event_types <= self.feature_dim:
            raise SpecError("event types must fit as orthogonal prototypes in the feature space")
        if not 1 <= self.duration_min <= self.duration_max:
            raise SpecError("need 1 <= duration_min <= duration_max")
        if not 0 <= self.gap_min <= self.gap_max:
            raise SpecError("need 0 <= gap_min <= gap_max")
        if self.noise < 0:
            raise SpecError("noise must be non-negative")
        if self.gap_min + self.duration_min > self.length:
            raise SpecError(
                f"no event fits: gap_min {self.gap_min} + duration_min {self.duration_min} "
                f"> length {self.length}"
            )

    @classmethod
    def from_config(cls, config: DataConfig) -> "StreamSpec":
        return cls(
            length=config.stream_length,
            feature_dim=config.feature_dim,
            event_types=config.event_types,
            noise=config.noise,
            duration_min=config.duration_min,
            duration_max=config.duration_max,
            gap_min=config.gap_min,
            gap_max=config.gap_max,
            seed=config.seed,
        )

    def prototypes(self) -> np.ndarray:
        """(E, d) mutually orthogonal prototypes of norm sqrt(d)."""
        rng = np.random.default_rng([self.seed, 99])
        q, _ = np.linalg.qr(rng.normal(size=(self.feature_dim, self.event_types)))
        return q.T * math.sqrt(self.feature_dim)


def _log_uniform_duration(rng: np.random.Generator, low: int, high: int) -> int:
    if low == high:
        return low
    value = math.exp(rng.uniform(math.log(low), math.log(high + 1)))
    return int(min(high, max(low, math.floor(value))))


def generate_stream(
    spec: StreamSpec, stream_index: int = 0, split: str = "train"
) -> Tuple[np.ndarray, List[PlantedEvent]]:
    """(T, d) frames and the planted events, fully determined by (spec, split, index)."""
    if split not in _SPLIT_CODES:
        raise SpecError(f"unknown split {split!r}")
    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], stream_index])
    prototypes = spec.prototypes()
    frames = rng.normal(0.0, 1.0, size=(spec.length, spec.feature_dim)) * spec.noise

    events: List[PlantedEvent] = []
    cursor = 1
    while True:
        gap = int(rng.integers(spec.gap_min, spec.gap_max + 1))
        duration = _log_uniform_duration(rng, spec.duration_min, spec.duration_max)
        start = cursor + gap
        end = start + duration - 1
        if end > spec.length:
            break
        event_type = int(rng.integers(spec.event_types))
        frames[start - 1 : end] += prototypes[event_type]
        events.append(PlantedEvent(event_type, start, end))
        cursor = end + 1
    return frames, events


def _candidates(events: Sequence[PlantedEvent], gap_min: int) -> Tuple[List[Tuple[str, PlantedEvent]], List[Tuple[str, PlantedEvent]]]:
    firsts, seconds = [], []
    seen: Dict[int, PlantedEvent] = {}
    second_done = set()
    for event in events:
        first = seen.get(event.event_type)
        if first is None:
            seen[event.event_type] = event
            firsts.append(("first", event))
        elif event.event_type not in second_done:
            second_done.add(event.event_type)
            if event.start - first.end - 1 >= gap_min:
                seconds.append(("second", event))
    return firsts, seconds


def generate_queries(
    events_by_stream: Sequence[Sequence[PlantedEvent]],
    ordinal_fraction: float,
    rng: np.random.Generator,
    vocabulary: Vocabulary,
    gap_min: int = 128,
    stream_ids: Optional[Sequence[str]] = None,
) -> List[List[Annotation]]:
    """
    Annotations per stream with ``ordinal_fraction`` of all queries asking for
    a second occurrence.

    Every type's first occurrence is a query candidate; a second occurrence
    qualifies when it starts at least ``gap_min`` frames after the first ends.
    The mix is balanced over the whole split by sampling from both pools.
    """
    if not 0.0 <= ordinal_fraction <= 1.0:
        raise GenerationError(f"ordinal fraction must be in [0, 1], got {ordinal_fraction}")
    ids = list(stream_ids) if stream_ids is not None else [f"{k:04d}" for k in range(len(events_by_stream))]
    firsts, seconds = [], []
    for k, events in enumerate(events_by_stream):
        f, s = _candidates(events, gap_min)
        firsts.extend((k, o, e) for o, e in f)
        seconds.extend((k, o, e) for o, e in s)

    if ordinal_fraction > 0 and not seconds:
        raise GenerationError(
            f"no second occurrences with gap >= {gap_min} frames in {len(events_by_stream)} streams "
            f"({len(firsts)} first occurrences); lower data.ordinal_gap_min or ordinal_fraction"
        )
    if ordinal_fraction == 0:
        n_first, n_second = len(firsts), 0
    elif ordinal_fraction == 1:
        n_first, n_second = 0, len(seconds)
    else:
        ratio = ordinal_fraction / (1.0 - ordinal_fraction)
        n_second = min(len(seconds), int(math.floor(ratio * len(firsts) + 0.5)))
        n_first = min(len(firsts), int(math.floor(n_second / ratio + 0.5)))
    if n_first + n_second == 0:
        raise GenerationError(f"no queries could be generated from {len(events_by_stream)} streams")

    chosen = [firsts[i] for i in sorted(rng.choice(len(firsts), n_first, replace=False))] if n_first else []
    chosen += [seconds[i] for i in sorted(rng.choice(len(seconds), n_second, replace=False))] if n_second else []
    chosen.sort(key=lambda item: (item[0], item[2].start))

    out: List[List[Annotation]] = [[] for _ in events_by_stream]
    for k, ordinal, event in chosen:
        q = len(out[k])
        out[k].append(
            Annotation(
                query_id=f"{ids[k]}-q{q}",
                stream_id=ids[k],
                tokens=(vocabulary.event_token(event.event_type), vocabulary.ordinal_token(ordinal)),
                gt=(event.start, event.end),
                ordinal=ordinal,
                event_type=event.event_type,
            )
        )
    logger.info("generated %d first and %d second-occurrence queries", n_first, n_second)
    return out


@dataclass
class StreamRecord:
    """One stream of a split with its queries."""

    stream_id: str
    frames: np.ndarray
    annotations: List[Annotation] = field(default_factory=list)

    @property
    def queries(self) -> List[QueryTask]:
        return [a.to_task() for a in self.annotations]


def build_split(config: DataConfig, split: str) -> List[StreamRecord]:
    spec = StreamSpec.from_config(config)
    count = config.train_streams if split == "train" else config.test_streams
    vocabulary = Vocabulary(config.event_types)
    frames_list, events_list = [], []
    for k in range(count):
        frames, events = generate_stream(spec, k, split)
        frames_list.append(frames)
        events_list.append(events)
    ids = [f"{split}-{k:04d}" for k in range(count)]
    rng = np.random.default_rng([config.seed, _SPLIT_CODES[split], 7])
    annotations = generate_queries(
        events_list, config.ordinal_fraction, rng, vocabulary, config.ordinal_gap_min, ids
    )
    return [StreamRecord(sid, f, a) for sid, f, a in zip(ids, frames_list, annotations)]


def frame_record(frame_index: int, features: np.ndarray) -> str:
    return json.dumps({"frame_index": frame_index, "features": [float(v) for v in features]})


def write_frames(path: Union[str, Path], frames: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for t, row in enumerate(frames, start=1):
            handle.write(frame_record(t, row) + "\n")
    return path


def iter_frame_records(
    lines: Iterator[str], source: str = "<input>", feature_dim: Optional[int] = None
) -> Iterator[Tuple[int, np.ndarray]]:
    """Parse frame JSONL; with ``feature_dim`` every record must be a vector of that width."""
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            index, features = int(record["frame_index"]), np.asarray(record["features"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedInputError(f"{source}:{line_no}: bad frame record: {exc}") from exc
        if feature_dim is not None and features.shape != (feature_dim,):
            raise MalformedInputError(
                f"{source}:{line_no}: frame {index} has shape {features.shape}, expected ({feature_dim},)"
            )
        yield index, features


def read_frames(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as handle:
        for expected, (index, features) in enumerate(iter_frame_records(handle, str(path)), start=1):
            if index != expected:
                raise MalformedInputError(f"{path}: frame {index} found where {expected} was expected")
            rows.append(features)
    if not rows:
        raise MalformedInputError(f"{path}: no frames")
    try:
        return np.stack(rows)
    except ValueError as exc:
        raise MalformedInputError(f"{path}: frames have inconsistent dimensions") from exc


def write_corpus(config: DataConfig, root: Union[str, Path]) -> Path:
    """Generate both splits under ``root`` with a provenance manifest."""
    root = Path(root)
    counts = {}
    for split in SPLITS:
        split_dir = root / split
        if split_dir.exists():
            shutil.rmtree(split_dir)
        split_dir.mkdir(parents=True)
        records = build_split(config, split)
        with (split_dir / "annotations.jsonl").open("w", encoding="utf-8") as handle:
            for record in records:
                write_frames(split_dir / f"{record.stream_id}.jsonl", record.frames)
                for annotation in record.annotations:
                    handle.write(json.dumps(annotation.to_record(), sort_keys=True) + "\n")
        counts[split] = {
            "streams": len(records),
            "queries": sum(len(r.annotations) for r in records),
            "again": sum(1 for r in records for a in r.annotations if a.ordinal == "second"),
        }
    manifest = {
        "data": asdict(config),
        "vocabulary": Vocabulary(config.event_types).tokens,
        "counts": counts,
        "checksum": corpus_checksum(root),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote corpus to %s: %s", root, counts)
    return root


def read_manifest(root: Union[str, Path]) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MalformedInputError(f"no corpus manifest at {path}; run gen-data first") from exc
    except json.JSONDecodeError as exc:
        raise MalformedInputError(f"corrupt corpus manifest {path}: {exc}") from exc


def read_annotations(path: Union[str, Path]) -> List[Annotation]:
    path = Path(path)
    annotations = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedInputError(f"{path}:{line_no}: {exc}") from exc
            annotations.append(Annotation.from_record(record))
    return annotations


def read_split(root: Union[str, Path], split: str, limit: Optional[int] = None) -> List[StreamRecord]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise MalformedInputError(f"corpus split directory {split_dir} does not exist")
    by_stream: Dict[str, List[Annotation]] = {}
    for annotation in read_annotations(split_dir / "annotations.jsonl"):
        by_stream.setdefault(annotation.stream_id, []).append(annotation)
    paths = sorted(p for p in split_dir.glob(f"{split}-*.jsonl"))
    if limit is not None:
        paths = paths[:limit]
    return [StreamRecord(p.stem, read_frames(p), by_stream.get(p.stem, [])) for p in paths]


def corpus_checksum(root: Union[str, Path]) -> str:
    """SHA-256 over the split files under ``root`` (relative path + bytes); the manifest is excluded."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for split in SPLITS for p in (root / split).rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()
