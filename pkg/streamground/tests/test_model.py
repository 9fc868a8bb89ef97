"""
Tests for the query-conditioned grounding model.
"""

import numpy as np
import pytest

from streamground.errors import DomainError, ShapeError, VocabularyError
from streamground.gradcheck import grad_check
from streamground.losses import assign_labels, total_loss
from streamground.model import GroundingModel, QueryTask
from streamground.proposals import EventProposal
from streamground.tensor import Tensor, no_grad


def tiny_model(**kwargs):
    options = dict(in_dim=4, vocab_size=6, dim=4, hidden=6, window=4, num_scales=3, seed=0)
    options.update(kwargs)
    return GroundingModel(**options)


def window_proposals(model, frames, state=None):
    state = state or model.tree.initial_state()
    batch, state = model.tree.ingest_window(frames, state)
    return batch.all_proposals(), state


class TestQueryTask:
    """Test query validation."""

    def test_rejects_empty_tokens(self):
        """Test a query without tokens raises DomainError."""
        with pytest.raises(DomainError):
            QueryTask("q", ())

    def test_rejects_bad_ground_truth(self):
        """Test an inverted ground truth raises DomainError."""
        with pytest.raises(DomainError):
            QueryTask("q", (1,), (5, 2))


class TestEncodeQuery:
    """Test the text encoder."""

    def setup_method(self):
        """Set up test fixtures."""
        self.model = tiny_model()

    def test_single_token_shape(self):
        """Test a one-token query encodes to one row."""
        assert self.model.encode_query([2]).shape == (1, 4)

    def test_deterministic(self):
        """Test identical queries give identical encodings."""
        a = self.model.encode_query([1, 4, 2]).data
        b = self.model.encode_query([1, 4, 2]).data
        assert np.array_equal(a, b)

    def test_order_sensitive(self):
        """Test permuted tokens give different encodings."""
        a = self.model.encode_query([1, 4]).data
        b = self.model.encode_query([4, 1]).data
        assert not np.allclose(a, b[::-1])

    def test_unknown_token(self):
        """Test tokens outside the vocabulary raise VocabularyError."""
        with pytest.raises(VocabularyError):
            self.model.encode_query([6])
        with pytest.raises(VocabularyError):
            self.model.encode_query([])


class TestRefinement:
    """Test memory-driven refinement and query fusion."""

    def setup_method(self):
        """Set up test fixtures."""
        self.model = tiny_model()
        self.rng = np.random.default_rng(0)

    def test_empty_memory_is_self_attention(self):
        """Test refinement with no memory equals the plain encoder pass."""
        with no_grad():
            proposals, _ = window_proposals(self.model, self.rng.normal(size=(4, 4)))
            refined = self.model.refine_with_memory(proposals, (), 4).data
            direct = self.model.refiner(self.model.embed_events(proposals, 4)).data
        assert np.array_equal(refined, direct)

    def test_duplicate_memory_entry(self):
        """Test a memory copy of the only proposal leaves the output unchanged."""
        p = EventProposal(1, 4, 4, 4, Tensor(self.rng.normal(size=4)), 4)
        with no_grad():
            alone = self.model.refine_with_memory([p], (), 4).data
            doubled = self.model.refine_with_memory([p], (p.detached(),), 4).data
        np.testing.assert_allclose(alone, doubled, atol=1e-12)

    def test_memory_changes_output(self):
        """Test a non-trivial memory alters the refined features."""
        with no_grad():
            proposals, _ = window_proposals(self.model, self.rng.normal(size=(4, 4)))
            memory = [EventProposal(2, 1, 1, 2, Tensor(self.rng.normal(size=4)), 0)]
            a = self.model.refine_with_memory(proposals, (), 4).data
            b = self.model.refine_with_memory(proposals, memory, 4).data
        assert a.shape == b.shape == (len(proposals), 4)
        assert not np.allclose(a, b)

    def test_per_scale_attention_keeps_order(self):
        """Test per-scale refinement returns rows in proposal order."""
        model = tiny_model(per_scale_attention=True)
        with no_grad():
            proposals, _ = window_proposals(model, self.rng.normal(size=(4, 4)))
            refined = model.refine_with_memory(proposals, (), 4).data
            first_scale = [p for p in proposals if p.scale == 1]
            alone = model.refiner(model.embed_events(first_scale, 4)).data
        np.testing.assert_allclose(refined[: len(first_scale)], alone, atol=1e-12)

    def test_refine_needs_proposals(self):
        """Test refinement without proposals raises ShapeError."""
        with pytest.raises(ShapeError):
            self.model.refine_with_memory([], (), 4)

    def test_fusion_shapes(self):
        """Test fusion keeps one row per proposal and checks widths."""
        refined = Tensor(self.rng.normal(size=(7, 4)))
        assert self.model.fuse_with_query(refined, self.model.encode_query([1, 2])).shape == (7, 4)
        with pytest.raises(ShapeError):
            self.model.fuse_with_query(refined, Tensor(np.ones((2, 3))))


class TestScoring:
    """Test heads and gradient flow through the full objective."""

    def setup_method(self):
        """Set up test fixtures."""
        self.model = tiny_model()
        self.rng = np.random.default_rng(2)

    def test_score_window_outputs(self):
        """Test per-query scores cover every proposal with valid probabilities."""
        with no_grad():
            proposals, _ = window_proposals(self.model, self.rng.normal(size=(4, 4)))
            queries = {"b": self.model.encode_query([2]), "a": self.model.encode_query([3, 1])}
            scores = self.model.score_window(proposals, (), queries, 4)
        assert [s.query_id for s in scores] == ["a", "b"]
        for s in scores:
            assert len(s) == len(proposals) == 7
            assert np.all((s.cls_prob.data > 0) & (s.cls_prob.data < 1))
            assert 0 < float(s.future_prob.data) < 1
            assert s.is_finite()

    def test_initial_probability_prior(self):
        """Test classifier heads start near the 0.01 prior."""
        with no_grad():
            proposals, _ = window_proposals(self.model, self.rng.normal(size=(4, 4)))
            scores = self.model.score_window(proposals, (), {"q": self.model.encode_query([1])}, 4)
        assert np.all(np.abs(scores[0].cls_prob.data - 0.01) < 0.05)

    def test_gradient_through_two_windows(self):
        """Test grad_check of the total loss over two windows for every parameter group."""
        frames = self.rng.normal(size=(8, 4))
        gt = (3, 4)
        groups = [
            self.model.tree.conv.bias,
            self.model.tree.merges[0].fc2.bias,
            self.model.scale_embedding,
            self.model.refiner.mlp.fc2.bias,
            self.model.fusion.cross_attn.v_proj.bias,
            self.model.token_embedding.weight,
            self.model.cls_head.fc2.weight,
            self.model.reg_head.fc2.bias,
            self.model.future_cls_head.fc2.bias,
            self.model.future_reg_head.fc2.weight,
        ]

        def objective():
            state = self.model.tree.initial_state()
            scores, labels = [], []
            memory = []
            for w in range(2):
                batch, state = self.model.tree.ingest_window(frames[4 * w : 4 * w + 4], state)
                proposals = batch.all_proposals()
                query = {"q": self.model.encode_query([1, 4])}
                window_scores = self.model.score_window(proposals, memory, query, batch.last_frame)
                scores.extend(window_scores)
                labels.append(assign_labels([tuple(s) for s in window_scores[0].spans], gt, 0.9, batch.last_frame, -4, 4))
                memory = memory + proposals
            return total_loss(scores, labels, [gt, gt]).total

        assert grad_check(objective, groups) < 1e-5
