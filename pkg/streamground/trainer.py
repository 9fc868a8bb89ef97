"""
Full-stream training.

Each training stream is replayed online through the engine exactly as at
inference time, memory included. The losses of all its windows and queries
are summed into one objective and one AdamW step is taken per stream (or
per ``accumulate_streams`` streams).
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import CheckpointManager, Container, fingerprint, load_container, save_container
from .config import RunConfig
from .engine import StreamingEngine, frames_from_array
from .errors import CheckpointError, TrainingError
from .intervals import frame_iou
from .losses import LabelAssignment, LossBreakdown, ProposalScores, assign_labels, total_loss
from .memory import EventMemory, FrameFifoMemory, HierarchicalMemory, ScaleWeights, estimate_scale_weights
from .model import GroundingModel
from .optim import ModelParameters, adamw_step, clip_grad_norm, cosine_learning_rate, fill_missing_grads
from .synthetic import StreamRecord, Vocabulary

logger = logging.getLogger(__name__)

MODEL_KIND = "model"
FUTURE_HEAD_PREFIXES = ("future_cls_head.", "future_reg_head.")


def build_model(config: RunConfig) -> GroundingModel:
    m = config.model
    return GroundingModel(
        in_dim=config.data.feature_dim,
        vocab_size=len(Vocabulary(config.data.event_types)),
        dim=m.dim,
        hidden=m.hidden,
        heads=m.heads,
        kernel=m.kernel,
        window=m.window,
        num_scales=m.scales,
        per_scale_attention=m.per_scale_attention,
        seed=m.seed,
    )


def scale_weights_for(config: RunConfig, streams: Sequence[StreamRecord]) -> ScaleWeights:
    """Positive-event frequencies per scale, or uniform when dynamic sizing is off."""
    if not config.ablation.dynamic_size:
        return ScaleWeights.uniform(config.model.scales)
    intervals = [a.gt for s in streams for a in s.annotations]
    return estimate_scale_weights(intervals, config.model.scales, config.train.theta_pos)


def build_memory(config: RunConfig, weights: ScaleWeights) -> EventMemory:
    if config.ablation.memory == "frame_fifo":
        return FrameFifoMemory(config.model.memory_size)
    delta = config.model.delta if config.ablation.adaptive_update else math.inf
    return HierarchicalMemory.allocate(config.model.memory_size, weights, delta)


def label_stream(
    scores: Sequence[ProposalScores],
    gts: Dict[str, Tuple[int, int]],
    config: RunConfig,
) -> List[LabelAssignment]:
    """Labels for every (window, query) score, with the optional best-proposal fallback."""
    t = config.train
    labels = [
        assign_labels([tuple(span) for span in s.spans], gts[s.query_id], t.theta_pos, s.window_end, t.future_a, t.future_b)
        for s in scores
    ]
    if not t.force_best_positive:
        return labels
    for qid, gt in gts.items():
        idx = [k for k, s in enumerate(scores) if s.query_id == qid]
        if not idx or any(labels[k].num_positive for k in idx):
            continue
        best_iou, best_at = -1.0, None
        for k in idx:
            for row, span in enumerate(scores[k].spans):
                value = frame_iou(tuple(span), gt)
                if value > best_iou:
                    best_iou, best_at = value, (k, row)
        if best_at is not None and best_iou > 0.0:
            labels[best_at[0]].proposal_labels[best_at[1]] = 1.0
    return labels


def stream_objective(
    stream: StreamRecord,
    model: GroundingModel,
    config: RunConfig,
    weights: ScaleWeights,
) -> LossBreakdown:
    """Replay one stream with gradients enabled and return its summed loss."""
    queries = [a.to_task() for a in stream.annotations]
    gts = {a.query_id: a.gt for a in stream.annotations}
    engine = StreamingEngine(
        model,
        queries,
        build_memory(config, weights),
        config.engine,
        training=True,
        use_future=config.ablation.future_prediction,
    )
    scores: List[ProposalScores] = []
    for frame in frames_from_array(stream.frames):
        output = engine.push(frame)
        if output is not None:
            scores.extend(output.scores)
    if engine.state.buffer:
        scores.extend(engine.run_window(final=True).scores)

    for s in scores:
        if not s.is_finite():
            raise TrainingError(
                f"non-finite model output on stream {stream.stream_id}, window ending at frame {s.window_end}"
            )
    labels = label_stream(scores, gts, config)
    breakdown = total_loss(
        scores,
        labels,
        [gts[s.query_id] for s in scores],
        config.train.focal_alpha,
        config.train.focal_gamma,
        use_future=config.ablation.future_prediction,
    )
    if not math.isfinite(breakdown.total.item()):
        raise TrainingError(
            f"non-finite loss {breakdown.total.item()} on stream {stream.stream_id} "
            f"({len(scores) // max(len(queries), 1)} windows)"
        )
    return breakdown


@dataclass
class EpochMetrics:
    epoch: int
    learning_rate: float
    loss: float
    cls: float
    reg: float
    future: float
    grad_norm: float
    streams: int
    seconds: float


def train_epoch(
    streams: Sequence[StreamRecord],
    model: GroundingModel,
    params: ModelParameters,
    config: RunConfig,
    weights: ScaleWeights,
    learning_rate: float,
    epoch: int = 1,
) -> Tuple[ModelParameters, EpochMetrics]:
    """One pass over ``streams``; streams without queries are skipped."""
    started = time.perf_counter()
    t = config.train
    totals = np.zeros(4)
    norms: List[float] = []
    used = 0
    pending = 0
    model.zero_grad()

    def apply_update() -> None:
        fill_missing_grads(params)
        norms.append(clip_grad_norm(params, t.grad_clip))
        if learning_rate > 0:
            adamw_step(params, learning_rate, weight_decay=t.weight_decay)
        model.zero_grad()

    for stream in streams:
        if not stream.annotations:
            continue
        breakdown = stream_objective(stream, model, config, weights)
        (breakdown.total * (1.0 / t.accumulate_streams)).backward()
        totals += [breakdown.total.item(), breakdown.cls, breakdown.reg, breakdown.future]
        used += 1
        pending += 1
        if pending == t.accumulate_streams:
            apply_update()
            pending = 0
    if pending:
        apply_update()

    if used == 0:
        raise TrainingError("no training stream has any query")
    means = totals / used
    metrics = EpochMetrics(
        epoch=epoch,
        learning_rate=learning_rate,
        loss=float(means[0]),
        cls=float(means[1]),
        reg=float(means[2]),
        future=float(means[3]),
        grad_norm=float(np.mean(norms)) if norms else 0.0,
        streams=used,
        seconds=time.perf_counter() - started,
    )
    return params, metrics


def save_model(
    path: Path,
    model: GroundingModel,
    params: ModelParameters,
    config: RunConfig,
    weights: ScaleWeights,
    epoch: int,
) -> Path:
    tensors = {f"param/{k}": v for k, v in model.state_arrays().items()}
    tensors.update({f"optim/{k}": v for k, v in params.optimizer_arrays().items()})
    metadata = {
        "config": config.to_dict(),
        "scale_weights": weights.to_list(),
        "epoch": epoch,
        "optimizer_step": params.step,
        "num_parameters": model.num_parameters(),
        "fingerprint": fingerprint(model.state_arrays()),
    }
    return save_container(path, Container(kind=MODEL_KIND, tensors=tensors, metadata=metadata))


@dataclass
class LoadedModel:
    model: GroundingModel
    config: RunConfig
    weights: ScaleWeights
    epoch: int
    container: Container = field(repr=False)

    def parameters(self) -> ModelParameters:
        params = self.model.parameters()
        optim = {k[len("optim/"):]: v for k, v in self.container.tensors.items() if k.startswith("optim/")}
        params.load_optimizer_arrays(optim, int(self.container.metadata.get("optimizer_step", 0)))
        return params


def load_model(path: Path) -> LoadedModel:
    container = load_container(path, expected_kind=MODEL_KIND)
    meta = container.metadata
    try:
        config = RunConfig.from_dict(meta["config"])
        weights = ScaleWeights(tuple(meta["scale_weights"]))
        expected = meta["fingerprint"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: checkpoint metadata lacks {exc}") from exc
    model = build_model(config)
    model.load_arrays({k[len("param/"):]: v for k, v in container.tensors.items() if k.startswith("param/")})
    if fingerprint(model.state_arrays()) != expected:
        raise CheckpointError(f"{path}: parameters do not match the stored fingerprint")
    return LoadedModel(model, config, weights, int(meta.get("epoch", 0)), container)


@dataclass
class TrainResult:
    model: GroundingModel
    weights: ScaleWeights
    history: List[EpochMetrics]
    final_path: Path


class Trainer:
    """Epoch loop with cosine learning rate, CSV log and periodic checkpoints."""

    LOG_FIELDS = [f for f in EpochMetrics.__dataclass_fields__]

    def __init__(
        self,
        config: RunConfig,
        streams: Sequence[StreamRecord],
        manager: Optional[CheckpointManager] = None,
        model: Optional[GroundingModel] = None,
        weights: Optional[ScaleWeights] = None,
    ):
        self.config = config
        self.streams = list(streams)
        self.manager = manager or CheckpointManager(config.paths.run_dir or None)
        self.model = model or build_model(config)
        self.weights = weights or scale_weights_for(config, self.streams)
        prefixes = config.train.trainable_prefixes
        full = self.model.parameters()
        self.params = full.subset(prefixes) if prefixes else full

    def fit(self, progress=None) -> TrainResult:
        cfg = self.config.train
        rng = np.random.default_rng(cfg.seed)
        history: List[EpochMetrics] = []
        log_path = self.manager.log_path
        with log_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=self.LOG_FIELDS)
            writer.writeheader()
            for epoch in range(1, cfg.epochs + 1):
                lr = cosine_learning_rate(cfg.learning_rate, epoch - 1, cfg.epochs, cfg.min_lr_ratio)
                order = rng.permutation(len(self.streams))
                _, metrics = train_epoch(
                    [self.streams[i] for i in order], self.model, self.params, self.config, self.weights, lr, epoch
                )
                history.append(metrics)
                writer.writerow(asdict(metrics))
                handle.flush()
                logger.info(
                    "epoch %d: loss %.4f (cls %.4f reg %.4f future %.4f) lr %.2e in %.1fs",
                    epoch, metrics.loss, metrics.cls, metrics.reg, metrics.future, lr, metrics.seconds,
                )
                if progress is not None:
                    progress(metrics)
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs:
                    save_model(self.manager.path_for(epoch), self.model, self.params, self.config, self.weights, epoch)
        final = save_model(self.manager.final_path, self.model, self.params, self.config, self.weights, cfg.epochs)
        return TrainResult(self.model, self.weights, history, final)
