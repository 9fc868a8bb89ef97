"""
Tests for label assignment and the training losses.
"""

import math

import numpy as np
import pytest

from streamground.errors import DomainError, ShapeError
from streamground.losses import (
    LabelAssignment,
    ProposalScores,
    assign_labels,
    diou_loss_1d,
    focal_loss,
    total_loss,
)
from streamground.model import GroundingModel
from streamground.tensor import Tensor, no_grad


def scalar_focal(c, y, alpha=0.25, gamma=2.0):
    c = min(max(c, 1e-7), 1 - 1e-7)
    if y:
        return -alpha * (1 - c) ** gamma * math.log(c)
    return -(1 - alpha) * c**gamma * math.log(1 - c)


def scalar_diou(p, g):
    ps, pe = p
    pe = max(pe, ps + 1)
    gs, ge = g
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    enclosing = max(pe, ge) - min(ps, gs)
    return 1 - inter / union + (((ps + pe) / 2 - (gs + ge) / 2) / enclosing) ** 2


def window_scores(spans, probs, offsets, future_prob, future_offset, window_end=8, query_id="q"):
    return ProposalScores(
        query_id=query_id,
        window_end=window_end,
        spans=np.array(spans, dtype=np.int64),
        cls_prob=Tensor(probs),
        offsets=Tensor(offsets),
        future_prob=Tensor(future_prob),
        future_offset=Tensor(future_offset),
    )


class TestFocalLoss:
    """Test the focal classification loss."""

    def test_half_probability(self):
        """Test c=0.5, label 1 gives 0.25 * 0.25 * ln 2."""
        assert focal_loss(Tensor([0.5]), [1.0]).item() == pytest.approx(0.043322, abs=1e-6)

    def test_perfect_prediction(self):
        """Test confident correct predictions cost almost nothing."""
        assert focal_loss(Tensor([1.0]), [1.0]).item() < 1e-6
        assert focal_loss(Tensor([0.0]), [0.0]).item() < 1e-6

    def test_matches_scalar_reference(self):
        """Test a random batch against the scalar formula."""
        rng = np.random.default_rng(0)
        c = rng.uniform(0, 1, size=20)
        y = rng.integers(0, 2, size=20).astype(float)
        got = focal_loss(Tensor(c), y).data
        np.testing.assert_allclose(got, [scalar_focal(a, b) for a, b in zip(c, y)], atol=1e-12)

    def test_monotone(self):
        """Test the loss falls with c for positives and rises for negatives."""
        c = np.linspace(0.01, 0.99, 30)
        pos = focal_loss(Tensor(c), np.ones(30)).data
        neg = focal_loss(Tensor(c), np.zeros(30)).data
        assert np.all(np.diff(pos) < 0)
        assert np.all(np.diff(neg) > 0)

    def test_label_shape(self):
        """Test mismatched label shape raises ShapeError."""
        with pytest.raises(ShapeError):
            focal_loss(Tensor([0.5, 0.5]), [1.0])


class TestDiouLoss:
    """Test the 1-D distance-IoU loss."""

    def test_exact_match(self):
        """Test identical intervals cost zero."""
        assert diou_loss_1d(Tensor([2.0, 9.0]), Tensor([2.0, 9.0])).item() == pytest.approx(0.0)

    def test_disjoint_example(self):
        """Test (0, 1) against (2, 3) gives 13/9."""
        assert diou_loss_1d(Tensor([0.0, 1.0]), Tensor([2.0, 3.0])).item() == pytest.approx(13 / 9)

    def test_matches_scalar_reference(self):
        """Test random intervals against the scalar formula and the [0, 2) range."""
        rng = np.random.default_rng(1)
        starts = rng.uniform(0, 50, size=(25, 2))
        lengths = rng.uniform(0.2, 30, size=(25, 2))
        pred = np.stack([starts[:, 0], starts[:, 0] + lengths[:, 0]], axis=1)
        gt = np.stack([starts[:, 1], starts[:, 1] + lengths[:, 1]], axis=1)
        got = diou_loss_1d(Tensor(pred), Tensor(gt)).data
        np.testing.assert_allclose(got, [scalar_diou(p, g) for p, g in zip(pred, gt)], atol=1e-12)
        assert np.all((got >= 0) & (got < 2))

    def test_shape_mismatch(self):
        """Test non-interval shapes raise ShapeError."""
        with pytest.raises(ShapeError):
            diou_loss_1d(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0, 3.0]))


class TestAssignLabels:
    """Test proposal and future-start labels."""

    def test_exact_proposal_is_positive(self):
        """Test a proposal equal to the ground truth is positive."""
        labels = assign_labels([(1, 8), (9, 16)], (1, 8), 0.5, 8, -4, 4)
        assert list(labels.proposal_labels) == [1.0, 0.0]
        assert labels.num_positive == 1

    def test_future_window(self):
        """Test the start label inside and outside [t + a, t + b]."""
        assert assign_labels([(1, 1)], (8, 12), 0.5, 10, -4, 4).future_label == 1
        assert assign_labels([(1, 1)], (20, 24), 0.5, 10, -4, 4).future_label == 0

    def test_permutation(self):
        """Test permuting proposals permutes labels identically."""
        spans = [(1, 4), (5, 8), (1, 8), (3, 3)]
        base = assign_labels(spans, (1, 6), 0.5, 8, -4, 4).proposal_labels
        order = [2, 0, 3, 1]
        permuted = assign_labels([spans[k] for k in order], (1, 6), 0.5, 8, -4, 4).proposal_labels
        assert list(permuted) == [base[k] for k in order]

    def test_invalid_ground_truth(self):
        """Test invalid intervals and empty future windows raise DomainError."""
        with pytest.raises(DomainError):
            assign_labels([(1, 1)], (5, 4), 0.5, 8, -4, 4)
        with pytest.raises(DomainError):
            assign_labels([(1, 1)], (1, 4), 0.5, 8, 4, -4)


class TestTotalLoss:
    """Test the combined objective."""

    def test_classification_only_without_positives(self):
        """Test no positives and a near-zero future probability leave only the classification term."""
        scores = [window_scores([(1, 1), (2, 2)], [0.3, 0.6], np.zeros((2, 2)), 1e-9, 0.0)]
        labels = [LabelAssignment(np.zeros(2), 0)]
        out = total_loss(scores, labels, [(40, 50)])
        expected = (scalar_focal(0.3, 0) + scalar_focal(0.6, 0)) / 2
        assert out.total.item() == pytest.approx(expected, abs=1e-10)
        assert out.reg == 0.0
        assert out.num_positive == 0

    def test_real_future_head_without_positives(self):
        """Test a model's own future output adds only its negative focal term when nothing is positive."""
        model = GroundingModel(in_dim=4, vocab_size=6, dim=4, hidden=6, window=4, num_scales=3, seed=0)
        rng = np.random.default_rng(7)
        with no_grad():
            batch, _ = model.tree.ingest_window(rng.normal(size=(4, 4)), model.tree.initial_state())
            proposals = batch.all_proposals()
            scores = model.score_window(proposals, (), {"q": model.encode_query([1])}, 4)
        gt = (40, 50)
        labels = [assign_labels([p.span for p in proposals], gt, 0.5, 4, -4, 4)]
        assert labels[0].num_positive == 0
        assert labels[0].future_label == 0

        out = total_loss(scores, labels, [gt])
        future_prob = float(scores[0].future_prob.data)
        assert out.reg == 0.0
        assert out.num_future_positive == 0
        assert out.future == pytest.approx(scalar_focal(future_prob, 0), rel=1e-9)
        assert out.total.item() == pytest.approx(out.cls + out.future, abs=1e-12)
        # the head starts near the 0.01 prior, so the extra term is small but present
        assert 0.0 < out.future < 1e-2

    def test_perfect_predictions(self):
        """Test perfect scores and offsets give a near-zero loss."""
        scores = [window_scores([(1, 4), (5, 8)], [1.0, 0.0], np.zeros((2, 2)), 1.0, -7.0)]
        labels = [LabelAssignment(np.array([1.0, 0.0]), 1)]
        assert total_loss(scores, labels, [(1, 4)]).total.item() < 1e-6

    def test_matches_summation_reference(self):
        """Test a random two-window batch against an independent summation."""
        rng = np.random.default_rng(5)
        spans = [(1, 2), (3, 4), (1, 4)]
        gts = [(2, 5), (2, 5)]
        scores, labels = [], []
        for t in (4, 8):
            probs = rng.uniform(0.05, 0.95, size=3)
            offsets = rng.normal(size=(3, 2)) * 0.3
            fp, fo = rng.uniform(0.1, 0.9), rng.normal()
            scores.append(window_scores(spans, probs, offsets, fp, fo, window_end=t))
            labels.append(assign_labels(spans, gts[0], 0.3, t, -4, 4))
        out = total_loss(scores, labels, gts)

        cls = np.mean([scalar_focal(c, y) for s, lab in zip(scores, labels) for c, y in zip(s.cls_prob.data, lab.proposal_labels)])
        regs = []
        for s, lab, (gs, ge) in zip(scores, labels, gts):
            for k, y in enumerate(lab.proposal_labels):
                if y:
                    a, b = s.spans[k]
                    regs.append(scalar_diou((a - 1 + s.offsets.data[k, 0], b + s.offsets.data[k, 1]), (gs - 1, ge)))
        fut = np.mean([scalar_focal(float(s.future_prob.data), lab.future_label) for s, lab in zip(scores, labels)])
        l1 = [abs(float(s.future_offset.data) - (g[0] - s.window_end)) for s, lab, g in zip(scores, labels, gts) if lab.future_label]
        expected = cls + (np.mean(regs) if regs else 0.0) + fut + (np.mean(l1) if l1 else 0.0)
        assert out.total.item() == pytest.approx(expected, abs=1e-10)
        assert out.num_future_positive == len(l1)

    def test_negative_proposal_leaves_regression(self):
        """Test adding a negative proposal changes the regression term not at all."""
        base = [window_scores([(1, 4)], [0.7], [[0.2, -0.1]], 0.5, 0.0)]
        more = [window_scores([(1, 4), (9, 12)], [0.7, 0.2], [[0.2, -0.1], [1.0, 1.0]], 0.5, 0.0)]
        a = total_loss(base, [LabelAssignment(np.array([1.0]), 0)], [(1, 4)])
        b = total_loss(more, [LabelAssignment(np.array([1.0, 0.0]), 0)], [(1, 4)])
        assert a.reg == pytest.approx(b.reg, abs=1e-15)
        assert b.cls == pytest.approx((a.cls + scalar_focal(0.2, 0)) / 2, abs=1e-12)

    def test_future_term_disabled(self):
        """Test use_future=False drops the future term."""
        scores = [window_scores([(1, 1)], [0.5], [[0.0, 0.0]], 0.5, 3.0)]
        out = total_loss(scores, [LabelAssignment(np.array([0.0]), 1)], [(9, 9)], use_future=False)
        assert out.future == 0.0

    def test_misaligned_inputs(self):
        """Test mismatched lengths raise ShapeError and empty input DomainError."""
        with pytest.raises(ShapeError):
            total_loss([], [LabelAssignment(np.zeros(1), 0)], [])
        with pytest.raises(DomainError):
            total_loss([], [], [])
