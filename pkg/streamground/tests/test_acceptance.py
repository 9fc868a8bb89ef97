"""
Acceptance runs on the default synthetic corpus: recall, the memory
ablation on repeated-event queries, and the start-delay trade of mode F.

Every test here trains at full size and is marked slow.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from streamground.checkpoint import CheckpointManager
from streamground.config import RunConfig
from streamground.engine import Mode, StreamingEngine, frames_from_array
from streamground.evaluation import delay_metrics, evaluate, rank_emissions, recall_key, run_ablation
from streamground.model import QueryTask
from streamground.synthetic import StreamSpec, Vocabulary, build_split
from streamground.trainer import Trainer, build_memory

R1 = recall_key(1, 0.5)


@pytest.fixture(scope="module")
def corpus():
    config = RunConfig()
    return config, build_split(config.data, "train"), build_split(config.data, "test")


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    config, train, _ = corpus
    return Trainer(config, train, CheckpointManager(tmp_path_factory.mktemp("run"))).fit()


@pytest.fixture(scope="module")
def reports(corpus, trained):
    config, _, test = corpus
    return evaluate(trained.model, test, config, trained.weights)


@pytest.mark.slow
class TestDefaultCorpus:
    """Test the trained default model on the held-out split."""

    def test_event_recall(self, reports):
        """Test mode E reaches R@1,IoU=0.5 of at least 80 percent."""
        assert reports[Mode.E].recall(1, 0.5) >= 80.0

    def test_forecast_start_delay(self, corpus, reports):
        """Test mode F starts earlier than mode E, within b frames, at no recall gain."""
        config, _, _ = corpus
        e, f = reports[Mode.E], reports[Mode.F]
        assert math.isfinite(e.sd) and math.isfinite(f.sd)
        assert f.sd < e.sd
        assert f.sd <= config.train.future_b
        assert e.recall(1, 0.5) >= f.recall(1, 0.5)

    def test_single_planted_event(self, corpus, trained):
        """Test one planted event is started sooner by mode F than by mode E."""
        config, _, _ = corpus
        spec = StreamSpec.from_config(config.data)
        rng = np.random.default_rng(11)
        frames = rng.normal(0.0, 1.0, size=(128, spec.feature_dim)) * spec.noise
        gt = (41, 72)
        frames[gt[0] - 1 : gt[1]] += spec.prototypes()[2]
        vocabulary = Vocabulary(spec.event_types)
        query = QueryTask("planted", (vocabulary.event_token(2), vocabulary.ordinal_token("first")), gt)

        engine = StreamingEngine(trained.model, [query], build_memory(config, trained.weights), replace(config.engine, mode="both"))
        emissions = engine.run(frames_from_array(frames))
        delays = {
            mode: delay_metrics(rank_emissions(emissions, mode, 1, config.engine.nms_iou), {"planted": gt})
            for mode in (Mode.E, Mode.F)
        }
        assert delays[Mode.E].matched == delays[Mode.F].matched == 1
        assert delays[Mode.F].sd < delays[Mode.E].sd


@pytest.mark.slow
class TestMemoryAblation:
    """Test event memory against the frame FIFO on repeated-event queries."""

    def test_again_subset_gap(self, corpus, tmp_path_factory):
        """Test hierarchical memory beats frame memory by at least 10 points on the again subset."""
        config, train, test = corpus
        rows = run_ablation(config, train, test, tmp_path_factory.mktemp("ablation"))
        again = {r["row"]: r[f"again {R1}"] for r in rows if r["mode"] == Mode.E.value}
        best = max(again["+ event memory"], again["+ adaptive update"])
        assert best - again["frame memory"] >= 10.0
