"""Tests for throughput and latency measurement."""

from streamground.bench import measure_throughput, step_latency_profile
from streamground.memory import ScaleWeights
from streamground.tests.conftest import tiny_config
from streamground.trainer import build_model


class TestBench:
    """Test speed reports."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = tiny_config()
        self.model = build_model(self.config)
        self.weights = ScaleWeights.uniform(self.config.model.scales)

    def test_throughput(self):
        """Test the report counts frames, queries and parameters."""
        report = measure_throughput(self.model, self.config, self.weights, frames=20, queries=3)
        assert report.frames == 20
        assert report.queries == 3
        assert report.parameters == self.model.num_parameters()
        assert report.frames_per_second > 0

    def test_latency_profile(self):
        """Test a median latency is reported for each position."""
        profile = step_latency_profile(self.model, self.config, self.weights, [32, 64], samples=2)
        assert sorted(profile) == [32, 64]
        assert all(v > 0 for v in profile.values())
