"""
Tests for the online streaming engine.
"""

import math

import numpy as np
import pytest

from streamground.checkpoint import load_container, save_container
from streamground.config import EngineConfig
from streamground.engine import (
    FeatureFrame,
    Mode,
    Prediction,
    StartFiring,
    StreamingEngine,
    finalize_predictions,
    frames_from_array,
    pair_future_with_proposal,
)
from streamground.errors import CheckpointError, MalformedInputError, ShapeError, StreamOrderError
from streamground.intervals import frame_iou
from streamground.memory import FrameFifoMemory, HierarchicalMemory, ScaleWeights
from streamground.model import GroundingModel, QueryTask
from streamground.tensor import no_grad
from streamground.tests.conftest import tiny_config

OPEN = EngineConfig(tau_cls=0.0, tau_f=0.0)


def make_model(seed=0):
    return GroundingModel(in_dim=4, vocab_size=5, dim=8, hidden=8, window=8, num_scales=4, seed=seed)


def make_memory():
    return HierarchicalMemory.allocate(8, ScaleWeights.uniform(4), delta=0.8)


QUERIES = [QueryTask("q0", (1, 3)), QueryTask("q1", (2, 4))]


def make_engine(model, config=OPEN, memory=None, **kwargs):
    return StreamingEngine(model, QUERIES, memory if memory is not None else make_memory(), config, **kwargs)


def emission_log(engine, frames):
    """(emitted at, record) for every emission while stepping through ``frames``."""
    log = []
    for frame in frames:
        for prediction in engine.step(frame):
            log.append((frame.frame_index, prediction.to_json()))
    return log


def prediction(qid="q", start=1.0, end=4.0, score=0.5, emit=8, mode=Mode.E):
    return Prediction(qid, start, end, score, emit, emit, mode)


class TestStep:
    """Test frame ingestion and window emission."""

    def setup_method(self):
        """Set up test fixtures."""
        self.model = make_model()
        self.frames = frames_from_array(np.random.default_rng(0).normal(size=(512, 4)))

    def test_open_window_emits_nothing(self):
        """Test seven frames of an eight-frame window produce no emission."""
        engine = make_engine(self.model)
        assert emission_log(engine, self.frames[:7]) == []
        assert len(engine.state.buffer) == 7
        assert engine.time == 7

    def test_window_close_emits(self):
        """Test the eighth frame closes the window and emits mode-E candidates."""
        engine = make_engine(self.model)
        log = emission_log(engine, self.frames[:8])
        assert log
        assert all(t == 8 for t, _ in log)
        assert len(engine.memory) > 0

    def test_deterministic_replay(self):
        """Test two runs over the same stream give identical logs."""
        a = emission_log(make_engine(make_model()), self.frames[:128])
        b = emission_log(make_engine(make_model()), self.frames[:128])
        assert a == b

    def test_prefix_causality(self):
        """Test the log up to t does not depend on whether the stream continues."""
        full = emission_log(make_engine(self.model), self.frames)
        for t in (100, 256, 333):
            prefix = emission_log(make_engine(self.model), self.frames[:t])
            assert prefix == [entry for entry in full if entry[0] <= t]

    def test_emit_time_laws(self):
        """Test mode-E and mode-F emit times follow the window schedule."""
        engine = make_engine(self.model)
        emissions = engine.run(self.frames[:200])
        modes = {p.mode for p in emissions}
        assert modes == {Mode.E, Mode.F}
        for p in emissions:
            assert p.start_emit_time <= p.end_emit_time
            assert p.end_emit_time % 8 == 0
            if p.mode is Mode.E:
                assert p.start_emit_time == p.end_emit_time
            else:
                assert p.start_emit_time < p.end_emit_time

    def test_memory_updated_after_prediction(self):
        """Test window 2 is scored against memory holding window 1 only."""
        engine = make_engine(self.model)
        outputs = [engine.push(f) for f in self.frames[:16]]
        second = outputs[15]
        memory = make_memory()
        with no_grad():
            state = self.model.tree.initial_state()
            batch, state = self.model.tree.ingest_window(np.stack([f.features for f in self.frames[:8]]), state)
            for event in batch.all_proposals():
                memory.insert(event.scale, event.detached())
            batch, state = self.model.tree.ingest_window(np.stack([f.features for f in self.frames[8:16]]), state)
            encoded = {q.query_id: self.model.encode_query(q.tokens) for q in QUERIES}
            expected = self.model.score_window(batch.all_proposals(), memory.snapshot(), encoded, 16)
        for got, want in zip(second.scores, expected):
            assert np.array_equal(got.cls_prob.data, want.cls_prob.data)

    def test_memory_stays_bounded(self):
        """Test memory never exceeds its capacity over a long stream."""
        engine = make_engine(self.model)
        for frame in self.frames:
            engine.step(frame)
            assert len(engine.memory) <= engine.memory.total_capacity

    def test_frame_fifo_memory(self):
        """Test the engine runs with the frame-level memory."""
        engine = make_engine(self.model, memory=FrameFifoMemory(16))
        engine.run(self.frames[:64])
        assert len(engine.memory) == 16

    def test_finish_flushes_partial_window(self):
        """Test a trailing partial window is processed at stream end."""
        engine = make_engine(self.model)
        emissions = engine.run(self.frames[:12])
        assert any(p.end_emit_time == 12 for p in emissions)
        assert engine.finish() == []

    def test_out_of_order_frame(self):
        """Test a skipped frame raises StreamOrderError."""
        engine = make_engine(self.model)
        engine.step(self.frames[0])
        with pytest.raises(StreamOrderError):
            engine.step(self.frames[2])

    def test_wrong_frame_width(self):
        """Test a frame of the wrong dimension raises ShapeError."""
        with pytest.raises(ShapeError):
            make_engine(self.model).step(FeatureFrame(1, np.zeros(3)))

    def test_duplicate_query_ids(self):
        """Test repeated query ids are rejected."""
        with pytest.raises(ShapeError):
            StreamingEngine(self.model, [QueryTask("q", (1,)), QueryTask("q", (2,))], make_memory())

    def test_mode_filter(self):
        """Test mode E alone never emits mode-F predictions."""
        engine = make_engine(self.model, EngineConfig(tau_cls=0.0, tau_f=0.0, mode="E"))
        assert {p.mode for p in engine.run(self.frames[:64])} == {Mode.E}

    def test_without_future_branch(self):
        """Test disabling the future branch creates no firings."""
        engine = make_engine(self.model, use_future=False)
        engine.run(self.frames[:64])
        assert engine.state.firings == []

    def test_frame_record_parsing(self):
        """Test frame records parse and malformed ones raise MalformedInputError."""
        frame = FeatureFrame.from_record({"frame_index": 3, "features": [1, 2, 3, 4]})
        assert frame.frame_index == 3
        with pytest.raises(MalformedInputError):
            FeatureFrame.from_record({"features": [1.0]})


class TestSuspendResume:
    """Test continuing a stream from a saved engine state."""

    def setup_method(self):
        """Set up test fixtures."""
        self.model = make_model()
        self.frames = frames_from_array(np.random.default_rng(4).normal(size=(192, 4)))

    def test_resume_matches_continuous_run(self, tmp_path):
        """Test suspend, save, load and resume reproduce the uninterrupted log."""
        full = emission_log(make_engine(self.model), self.frames)
        first = make_engine(self.model)
        head = emission_log(first, self.frames[:96])
        path = save_container(tmp_path / "state.json", first.suspend())
        resumed = StreamingEngine.resume(self.model, QUERIES, load_container(path, "engine-state"), OPEN)
        tail = emission_log(resumed, self.frames[96:])
        assert head + tail == full

    def test_suspend_mid_window(self):
        """Test suspending with buffered frames raises CheckpointError."""
        engine = make_engine(self.model)
        engine.step(self.frames[0])
        with pytest.raises(CheckpointError):
            engine.suspend()

    def test_resume_with_other_queries(self):
        """Test resuming with a different query set raises CheckpointError."""
        engine = make_engine(self.model)
        emission_log(engine, self.frames[:8])
        with pytest.raises(CheckpointError):
            StreamingEngine.resume(self.model, QUERIES[:1], engine.suspend(), OPEN)


class TestPairing:
    """Test completion of future-branch starts."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = EngineConfig(horizon=256, pair_tolerance=2.0)
        self.firing = StartFiring("q", fired_at=6, start=10.0, score=0.64)

    def test_containing_candidate(self):
        """Test start 10 pairs with a later candidate (9, 40) into (10, 40)."""
        cand = prediction(start=9.0, end=40.0, score=0.81, emit=40)
        out = pair_future_with_proposal(self.firing, [cand], self.config)
        assert out.span == (10.0, 40.0)
        assert out.start_emit_time == 6
        assert out.end_emit_time == 40
        assert out.mode is Mode.F
        assert out.score == pytest.approx(math.sqrt(0.64 * 0.81))

    def test_tolerance(self):
        """Test a start within two frames of the candidate still pairs."""
        near = prediction(start=12.0, end=20.0, emit=24)
        far = prediction(start=12.5, end=20.0, emit=24)
        assert pair_future_with_proposal(self.firing, [near], self.config) is not None
        assert pair_future_with_proposal(self.firing, [far], self.config) is None

    def test_same_window_and_beyond_horizon(self):
        """Test candidates from the firing window or past the horizon are ignored."""
        same = prediction(start=9.0, end=12.0, emit=6)
        late = prediction(start=9.0, end=12.0, emit=6 + 257)
        assert pair_future_with_proposal(self.firing, [same, late], self.config) is None

    def test_highest_score_wins(self):
        """Test the best-scoring containing candidate is chosen."""
        low = prediction(start=8.0, end=30.0, score=0.6, emit=32)
        high = prediction(start=9.0, end=18.0, score=0.9, emit=32)
        assert pair_future_with_proposal(self.firing, [low, high], self.config).end == 18.0

    def test_firing_expires(self):
        """Test a firing with no candidate for H frames is dropped silently."""
        model = make_model()
        engine = make_engine(model, EngineConfig(tau_cls=1.0, tau_f=0.0, horizon=16))
        frames = frames_from_array(np.random.default_rng(1).normal(size=(64, 4)))
        emissions = engine.run(frames)
        assert emissions == []
        assert all(engine.time - f.fired_at <= 16 for f in engine.state.firings)


def brute_force_nms(cands, n, threshold):
    remaining = list(cands)
    kept = []
    while remaining and len(kept) < n:
        best = max(remaining, key=lambda p: p.score)
        kept.append(best)
        remaining = [p for p in remaining if p is not best and frame_iou(p.span, best.span) < threshold]
    return kept


class TestFinalize:
    """Test ranking and suppression."""

    def test_single_candidate(self):
        """Test a lone candidate is returned unchanged."""
        cand = prediction()
        assert finalize_predictions([cand], 5, 0.5) == {"q": [cand]}

    def test_identical_intervals(self):
        """Test the lower-scored duplicate is suppressed even at threshold 1."""
        a, b = prediction(score=0.9), prediction(score=0.4)
        assert finalize_predictions([b, a], 5, 1.0) == {"q": [a]}

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        """Test 50 random candidates against a quadratic scan."""
        rng = np.random.default_rng(seed)
        cands = []
        for _ in range(50):
            start = float(rng.integers(1, 60))
            cands.append(prediction(start=start, end=start + float(rng.integers(0, 20)), score=float(rng.uniform())))
        got = finalize_predictions(cands, 5, 0.5)["q"]
        assert got == brute_force_nms(cands, 5, 0.5)

    def test_engine_finalize_covers_all_queries(self):
        """Test queries without candidates still get an (empty) list."""
        engine = make_engine(make_model())
        ranked = engine.finalize([prediction(qid="q0")])
        assert set(ranked) == {"q0", "q1"}
        assert ranked["q1"] == []


@pytest.mark.slow
class TestStepCost:
    """Test per-frame cost does not grow with stream position."""

    def test_latency_flat_over_stream(self):
        """Test step latency near frame 10^5 is within 1.5x of near frame 10^3."""
        from streamground.bench import step_latency_profile
        from streamground.trainer import build_model

        config = tiny_config("data.feature_dim=4")
        profile = step_latency_profile(
            build_model(config), config, ScaleWeights.uniform(config.model.scales), [1000, 100000], samples=32
        )
        assert profile[100000] < 1.5 * profile[1000]
