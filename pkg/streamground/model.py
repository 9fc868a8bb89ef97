"""
Query-conditioned scoring model.

Per window: proposals from the segment tree are refined against the event
memory with one encoder layer, fused with the encoded query through one
decoder layer, and scored by four heads (proposal probability, boundary
offsets, future-start probability, future-start offset).
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError, VocabularyError
from .losses import ProposalScores
from .nn import (
    MLP,
    Embedding,
    Module,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    sinusoidal_encoding,
)
from .proposals import EventProposal, ProposalTree
from .tensor import Parameter, Tensor, concat, stack

# Classifier heads start at probability 0.01 so the focal loss is not
# swamped by the many negatives on the first steps.
PRIOR_PROBABILITY = 0.01


@dataclass(frozen=True)
class QueryTask:
    """A tokenized query, with its ground truth when known."""

    query_id: str
    tokens: Tuple[int, ...]
    gt: Optional[Tuple[int, int]] = None
    subset: str = "first"

    def __post_init__(self):
        if not self.tokens:
            raise DomainError(f"query {self.query_id} has no tokens")
        if self.gt is not None and not 1 <= self.gt[0] <= self.gt[1]:
            raise DomainError(f"query {self.query_id} has invalid ground truth {self.gt}")


class GroundingModel(Module):
    def __init__(
        self,
        in_dim: int,
        vocab_size: int,
        dim: int = 32,
        hidden: int = 64,
        heads: int = 1,
        kernel: int = 3,
        window: int = 8,
        num_scales: int = 8,
        per_scale_attention: bool = False,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.vocab_size = vocab_size
        self.per_scale_attention = per_scale_attention
        self.tree = ProposalTree(in_dim, dim, window, num_scales, kernel, hidden, rng)
        self.token_embedding = Embedding(vocab_size, dim, rng)
        self.text_encoder = TransformerEncoderLayer(dim, hidden, heads, rng)
        self.scale_embedding = Parameter(rng.normal(0.0, 0.1, size=(num_scales, dim)))
        self.refiner = TransformerEncoderLayer(dim, hidden, heads, rng)
        self.fusion = TransformerDecoderLayer(dim, hidden, heads, rng)
        self.cls_head = MLP(dim, hidden, 1, rng)
        self.reg_head = MLP(dim, hidden, 2, rng)
        self.future_cls_head = MLP(dim, hidden, 1, rng)
        self.future_reg_head = MLP(dim, hidden, 1, rng)

        prior = -math.log((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
        self.cls_head.fc2.bias.data[:] = prior
        self.future_cls_head.fc2.bias.data[:] = prior
        # offsets start near zero so the first predictions are the raw proposals
        self.reg_head.fc2.weight.data *= 0.1
        self.reg_head.fc2.bias.data[:] = 0.0

    @property
    def window(self) -> int:
        return self.tree.window

    @property
    def num_scales(self) -> int:
        return self.tree.num_scales

    @property
    def in_dim(self) -> int:
        return self.tree.in_dim

    def encode_query(self, tokens: Sequence[int]) -> Tensor:
        ids = list(tokens)
        if not ids:
            raise VocabularyError("empty query")
        bad = [t for t in ids if not 0 <= t < self.vocab_size]
        if bad:
            raise VocabularyError(f"tokens {bad} outside vocabulary of size {self.vocab_size}")
        x = self.token_embedding(ids) + sinusoidal_encoding(range(len(ids)), self.dim)
        return self.text_encoder(x)

    def embed_events(self, events: Sequence[EventProposal], now: int) -> Tensor:
        """Event features plus scale embedding plus encoding of their age at ``now``."""
        feats = stack([e.feature for e in events], axis=0)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ShapeError(f"event features have shape {feats.shape}, expected (n, {self.dim})")
        scales = np.array([e.scale - 1 for e in events], dtype=np.int64)
        ages = [now - e.center for e in events]
        return feats + self.scale_embedding[scales] + sinusoidal_encoding(ages, self.dim)

    def refine_with_memory(
        self, proposals: Sequence[EventProposal], snapshot: Sequence[EventProposal], now: int
    ) -> Tensor:
        if not proposals:
            raise ShapeError("refinement needs at least one proposal")
        if not self.per_scale_attention:
            x = self.embed_events(proposals, now)
            memory = self.embed_events(snapshot, now) if snapshot else None
            return self.refiner(x, memory)

        # each scale attends to its own scale in the window and in memory
        rows: List[Tensor] = []
        order: List[int] = []
        for scale in sorted({p.scale for p in proposals}):
            picked = [k for k, p in enumerate(proposals) if p.scale == scale]
            same = [e for e in snapshot if e.scale == scale]
            x = self.embed_events([proposals[k] for k in picked], now)
            memory = self.embed_events(same, now) if same else None
            rows.append(self.refiner(x, memory))
            order.extend(picked)
        inverse = np.argsort(np.array(order))
        return concat(rows, axis=0)[inverse]

    def fuse_with_query(self, refined: Tensor, query: Tensor) -> Tensor:
        if refined.shape[0] == 0 or query.shape[0] == 0:
            raise ShapeError("fusion needs non-empty proposals and query")
        if refined.shape[1] != query.shape[1]:
            raise ShapeError(f"proposal width {refined.shape[1]} != query width {query.shape[1]}")
        return self.fusion(refined, query)

    def heads(
        self, fused: Tensor, proposals: Sequence[EventProposal], window_end: int, query_id: str
    ) -> ProposalScores:
        n = fused.shape[0]
        spans = np.array([p.span for p in proposals], dtype=np.int64)
        durations = np.array([[p.duration] for p in proposals], dtype=np.float64)
        pooled = fused.mean(axis=0, keepdims=True)
        return ProposalScores(
            query_id=query_id,
            window_end=window_end,
            spans=spans,
            cls_prob=self.cls_head(fused).sigmoid().reshape(n),
            offsets=self.reg_head(fused) * durations,
            future_prob=self.future_cls_head(pooled).sigmoid().reshape(()),
            future_offset=self.future_reg_head(pooled).reshape(()),
        )

    def score_window(
        self,
        proposals: Sequence[EventProposal],
        snapshot: Sequence[EventProposal],
        queries: Dict[str, Tensor],
        window_end: int,
    ) -> List[ProposalScores]:
        """Refine once, then fuse and score per query (in query id order)."""
        refined = self.refine_with_memory(proposals, snapshot, window_end)
        return [
            self.heads(self.fuse_with_query(refined, queries[qid]), proposals, window_end, qid)
            for qid in sorted(queries)
        ]
