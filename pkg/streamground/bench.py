"""Streaming throughput and per-step latency measurements."""

import statistics
import time
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .config import RunConfig
from .engine import FeatureFrame, StreamingEngine
from .memory import ScaleWeights
from .model import GroundingModel, QueryTask
from .synthetic import Vocabulary
from .trainer import build_memory


@dataclass
class SpeedReport:
    parameters: int
    frames: int
    seconds: float
    queries: int

    @property
    def frames_per_second(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else float("inf")


def _bench_queries(config: RunConfig, count: int) -> List[QueryTask]:
    vocab = Vocabulary(config.data.event_types)
    return [
        QueryTask(
            f"bench-q{k}",
            (vocab.event_token(k % config.data.event_types), vocab.ordinal_token("first")),
        )
        for k in range(count)
    ]


def _frame_source(config: RunConfig, seed: int):
    rng = np.random.default_rng(seed)
    t = 0
    while True:
        t += 1
        yield FeatureFrame(t, rng.normal(0.0, 1.0, size=config.data.feature_dim))


def measure_throughput(
    model: GroundingModel,
    config: RunConfig,
    weights: ScaleWeights,
    frames: int = 1024,
    queries: int = 1,
    seed: int = 0,
) -> SpeedReport:
    """Frames per second of the full online pipeline (feature extraction excluded)."""
    engine = StreamingEngine(
        model, _bench_queries(config, queries), build_memory(config, weights), config.engine,
        use_future=config.ablation.future_prediction,
    )
    source = _frame_source(config, seed)
    started = time.perf_counter()
    for _ in range(frames):
        engine.step(next(source))
    engine.finish()
    return SpeedReport(model.num_parameters(), frames, time.perf_counter() - started, queries)


def step_latency_profile(
    model: GroundingModel,
    config: RunConfig,
    weights: ScaleWeights,
    positions: Sequence[int],
    samples: int = 64,
    seed: int = 0,
) -> Dict[int, float]:
    """
    Median per-frame step latency (seconds, window cost spread over its
    frames) measured over ``samples`` windows ending at each position.
    """
    window = model.window
    engine = StreamingEngine(
        model, _bench_queries(config, 1), build_memory(config, weights), config.engine,
        use_future=config.ablation.future_prediction,
    )
    source = _frame_source(config, seed)
    targets = sorted(positions)
    timings: Dict[int, List[float]] = {p: [] for p in targets}
    horizon = targets[-1]
    t = 0
    while t < horizon:
        start = time.perf_counter()
        for _ in range(window):
            engine.step(next(source))
        elapsed = (time.perf_counter() - start) / window
        t += window
        for p in targets:
            if p - samples * window < t <= p:
                timings[p].append(elapsed)
    return {p: statistics.median(v) for p, v in timings.items() if v}
