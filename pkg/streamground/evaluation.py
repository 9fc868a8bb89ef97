"""
Offline evaluation of emission logs.

Recall: R@n,IoU=m is the share of queries whose top-n list holds at least
one prediction with IoU >= m against the ground truth.
Delay: the top-1 prediction of a query counts when its IoU reaches
``m_match``; SD is its start emit time minus the true start and ED its end
emit time minus the true end (negative means before the boundary), averaged
over matched queries.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .checkpoint import CheckpointManager
from .config import RunConfig
from .engine import Mode, Prediction, StreamingEngine, finalize_predictions, frames_from_array
from .errors import EvaluationError, MalformedInputError
from .intervals import frame_iou, iou
from .memory import ScaleWeights
from .model import GroundingModel
from .synthetic import Annotation, StreamRecord, read_annotations
from .trainer import FUTURE_HEAD_PREFIXES, Trainer, build_memory, build_model

logger = logging.getLogger(__name__)

SUBSETS = ("all", "first", "again")

__all__ = [
    "iou",
    "frame_iou",
    "recall_at",
    "delay_metrics",
    "DelayReport",
    "MetricReport",
    "evaluate",
    "run_ablation",
    "tradeoff_sweep",
]


def recall_key(n: int, m: float) -> str:
    return f"R@{n},IoU={m:g}"


def recall_at(
    predictions: Mapping[str, Sequence[Prediction]],
    gts: Mapping[str, Tuple[int, int]],
    n: int,
    m: float,
) -> float:
    """Percentage of queries whose top-n predictions include one with IoU >= m."""
    if not gts:
        return 0.0
    hits = 0
    for qid, gt in gts.items():
        top = predictions.get(qid, [])[:n]
        if any(frame_iou(p.span, gt) >= m for p in top):
            hits += 1
    return 100.0 * hits / len(gts)


@dataclass
class DelayReport:
    sd: float
    ed: float
    matched: int
    total: int

    @property
    def matched_fraction(self) -> float:
        return self.matched / self.total if self.total else 0.0


def delay_metrics(
    predictions: Mapping[str, Sequence[Prediction]],
    gts: Mapping[str, Tuple[int, int]],
    m_match: float = 0.5,
) -> DelayReport:
    """Mean start/end emission delay of matched top-1 predictions (NaN when none match)."""
    starts, ends = [], []
    for qid, (s, e) in gts.items():
        top = predictions.get(qid, [])
        if not top or frame_iou(top[0].span, (s, e)) < m_match:
            continue
        starts.append(top[0].start_emit_time - s)
        ends.append(top[0].end_emit_time - e)
    if not starts:
        return DelayReport(math.nan, math.nan, 0, len(gts))
    return DelayReport(sum(starts) / len(starts), sum(ends) / len(ends), len(starts), len(gts))


@dataclass
class SubsetMetrics:
    queries: int
    recalls: Dict[str, float]
    sd: float
    ed: float
    matched_fraction: float


@dataclass
class MetricReport:
    mode: str
    subsets: Dict[str, SubsetMetrics]
    recall_n: List[int]
    recall_m: List[float]
    config: Dict[str, dict] = field(default_factory=dict)

    @property
    def recalls(self) -> Dict[str, float]:
        return self.subsets["all"].recalls

    @property
    def sd(self) -> float:
        return self.subsets["all"].sd

    @property
    def ed(self) -> float:
        return self.subsets["all"].ed

    def recall(self, n: int, m: float, subset: str = "all") -> float:
        return self.subsets[subset].recalls[recall_key(n, m)]

    def check_monotonic(self) -> None:
        """R@n must not drop as n grows, nor rise as m grows."""
        ns, ms = sorted(self.recall_n), sorted(self.recall_m)
        for name, sub in self.subsets.items():
            for m in ms:
                values = [sub.recalls[recall_key(n, m)] for n in ns]
                if any(b < a for a, b in zip(values, values[1:])):
                    raise EvaluationError(f"{name}: recall decreases with n at IoU={m}: {values}")
            for n in ns:
                values = [sub.recalls[recall_key(n, m)] for m in ms]
                if any(b > a for a, b in zip(values, values[1:])):
                    raise EvaluationError(f"{name}: recall increases with m at n={n}: {values}")
            for key, value in sub.recalls.items():
                if not 0.0 <= value <= 100.0:
                    raise EvaluationError(f"{name}: {key} = {value} outside [0, 100]")

    def rows(self) -> List[Dict[str, Union[str, float, int]]]:
        out = []
        for name, sub in self.subsets.items():
            row: Dict[str, Union[str, float, int]] = {"mode": self.mode, "subset": name, "queries": sub.queries}
            row.update(sub.recalls)
            row.update({"SD": sub.sd, "ED": sub.ed, "matched": sub.matched_fraction})
            out.append(row)
        return out


def build_report(
    ranked: Mapping[str, Sequence[Prediction]],
    annotations: Sequence[Annotation],
    mode: str,
    recall_n: Sequence[int],
    recall_m: Sequence[float],
    m_match: float,
    config: Optional[RunConfig] = None,
) -> MetricReport:
    subsets = {}
    for name in SUBSETS:
        chosen = [a for a in annotations if name == "all" or a.subset == name]
        gts = {a.query_id: a.gt for a in chosen}
        delays = delay_metrics(ranked, gts, m_match)
        subsets[name] = SubsetMetrics(
            queries=len(gts),
            recalls={recall_key(n, m): recall_at(ranked, gts, n, m) for n in recall_n for m in recall_m},
            sd=delays.sd,
            ed=delays.ed,
            matched_fraction=delays.matched_fraction,
        )
    report = MetricReport(mode, subsets, list(recall_n), list(recall_m), config.to_dict() if config else {})
    report.check_monotonic()
    return report


def rank_emissions(
    emissions: Iterable[Prediction], mode: Mode, top_n: int, nms_iou: float
) -> Dict[str, List[Prediction]]:
    return finalize_predictions((p for p in emissions if p.mode == mode), top_n, nms_iou)


def stream_emissions(
    model: GroundingModel,
    stream: StreamRecord,
    config: RunConfig,
    weights: ScaleWeights,
) -> List[Prediction]:
    """Run one stream online and return its emission log."""
    engine_config = replace(config.engine, mode="both")
    engine = StreamingEngine(
        model,
        stream.queries,
        build_memory(config, weights),
        engine_config,
        use_future=config.ablation.future_prediction,
    )
    return engine.run(frames_from_array(stream.frames))


def write_emission_log(path: Path, emissions: Sequence[Prediction]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for prediction in emissions:
            handle.write(prediction.to_json() + "\n")
    return path


def read_emission_log(path: Path) -> List[Prediction]:
    emissions = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                emissions.append(Prediction.from_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise MalformedInputError(f"{path}:{line_no}: {exc}") from exc
    return emissions


def evaluate(
    model: GroundingModel,
    streams: Sequence[StreamRecord],
    config: RunConfig,
    weights: ScaleWeights,
    modes: Sequence[Mode] = (Mode.E, Mode.F),
    emission_dir: Optional[Path] = None,
) -> Dict[Mode, MetricReport]:
    """Stream every test stream once and report each requested mode."""
    if not config.ablation.future_prediction:
        modes = [m for m in modes if m != Mode.F]
    emissions: List[Prediction] = []
    for stream in streams:
        log = stream_emissions(model, stream, config, weights)
        if emission_dir is not None:
            write_emission_log(Path(emission_dir) / f"{stream.stream_id}.jsonl", log)
        emissions.extend(log)
    annotations = [a for s in streams for a in s.annotations]
    return reports_from_emissions(emissions, annotations, config, modes)


def reports_from_emissions(
    emissions: Sequence[Prediction],
    annotations: Sequence[Annotation],
    config: RunConfig,
    modes: Sequence[Mode] = (Mode.E, Mode.F),
) -> Dict[Mode, MetricReport]:
    ev = config.eval
    top_n = max(max(ev.recall_n), config.engine.top_n)
    return {
        mode: build_report(
            rank_emissions(emissions, mode, top_n, config.engine.nms_iou),
            annotations,
            mode.value,
            ev.recall_n,
            ev.recall_m,
            ev.m_match,
            config,
        )
        for mode in modes
    }


def recompute_from_logs(
    emission_dir: Path, annotations_path: Path, config: RunConfig, modes: Sequence[Mode] = (Mode.E, Mode.F)
) -> Dict[Mode, MetricReport]:
    """Metrics from stored emission logs alone; no model involved."""
    emissions: List[Prediction] = []
    for path in sorted(Path(emission_dir).glob("*.jsonl")):
        emissions.extend(read_emission_log(path))
    return reports_from_emissions(emissions, read_annotations(annotations_path), config, modes)


def format_report(report: MetricReport) -> str:
    keys = [recall_key(n, m) for n in report.recall_n for m in report.recall_m]
    header = f"{'mode':<5} {'subset':<7} {'queries':>7} " + " ".join(f"{k:>14}" for k in keys) + f" {'SD':>8} {'ED':>8}"
    lines = [header, "-" * len(header)]
    for name, sub in report.subsets.items():
        cells = " ".join(f"{sub.recalls[k]:>14.2f}" for k in keys)
        lines.append(f"{report.mode:<5} {name:<7} {sub.queries:>7} {cells} {sub.sd:>8.2f} {sub.ed:>8.2f}")
    return "\n".join(lines)


def write_rows_csv(path: Path, rows: Sequence[Mapping[str, object]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


ABLATION_ROWS = [
    ("frame memory", "frame_fifo", False, False, False),
    ("+ event memory", "event", False, False, False),
    ("+ dynamic size", "event", True, False, False),
    ("+ adaptive update", "event", True, True, False),
    ("+ future prediction", "event", True, True, True),
]


def ablation_configs(config: RunConfig) -> List[Tuple[str, RunConfig]]:
    out = []
    for name, memory, dynamic, adaptive, future in ABLATION_ROWS:
        out.append(
            (
                name,
                config.with_overrides(
                    [
                        f'ablation.memory="{memory}"',
                        f"ablation.dynamic_size={str(dynamic).lower()}",
                        f"ablation.adaptive_update={str(adaptive).lower()}",
                        f"ablation.future_prediction={str(future).lower()}",
                    ]
                ),
            )
        )
    return out


def run_ablation(
    config: RunConfig,
    train_streams: Sequence[StreamRecord],
    test_streams: Sequence[StreamRecord],
    run_root: Path,
) -> List[Dict[str, object]]:
    """Train and evaluate each component row, from frame memory up to the full model."""
    rows: List[Dict[str, object]] = []
    for k, (name, row_config) in enumerate(ablation_configs(config)):
        logger.info("ablation row %d: %s", k + 1, name)
        trainer = Trainer(row_config, train_streams, CheckpointManager(Path(run_root) / f"row{k + 1}"))
        result = trainer.fit()
        reports = evaluate(result.model, test_streams, row_config, result.weights)
        for mode, report in reports.items():
            row: Dict[str, object] = {"row": name, **{f"ablation.{f}": v for f, v in row_config.to_dict()["ablation"].items()}}
            row["mode"] = mode.value
            for subset in ("all", "again"):
                for key, value in report.subsets[subset].recalls.items():
                    row[f"{subset} {key}"] = value
            row["SD"] = report.sd
            row["ED"] = report.ed
            rows.append(row)
    return rows


@dataclass
class SweepResult:
    rows: List[Dict[str, float]]
    violations: List[str]


def sweep_violations(rows: Sequence[Mapping[str, float]]) -> List[str]:
    """Pairs where a wider (a, b) window gave a later start than a window it contains."""
    flagged = []
    for wide in rows:
        for narrow in rows:
            if wide is narrow:
                continue
            contains = wide["a"] <= narrow["a"] and wide["b"] >= narrow["b"]
            if not contains or (wide["a"], wide["b"]) == (narrow["a"], narrow["b"]):
                continue
            if math.isfinite(wide["SD"]) and math.isfinite(narrow["SD"]) and wide["SD"] > narrow["SD"]:
                flagged.append(
                    f"({wide['a']:g},{wide['b']:g}) SD {wide['SD']:.2f} > "
                    f"({narrow['a']:g},{narrow['b']:g}) SD {narrow['SD']:.2f}"
                )
    return flagged


def tradeoff_sweep(
    base_model: GroundingModel,
    config: RunConfig,
    weights: ScaleWeights,
    points: Sequence[Sequence[int]],
    train_streams: Sequence[StreamRecord],
    test_streams: Sequence[StreamRecord],
    run_root: Path,
) -> SweepResult:
    """Retrain only the future head for each (a, b) and measure mode-F recall and SD."""
    m = config.eval.m_match
    ms = sorted(set(config.eval.recall_m) | {m})
    ns = sorted(set(config.eval.recall_n) | {1})
    rows: List[Dict[str, float]] = []
    for a, b in points:
        point_config = config.with_overrides(
            [
                f"train.future_a={a}",
                f"train.future_b={b}",
                f"train.epochs={config.eval.sweep_epochs}",
                "train.trainable_prefixes=[" + ", ".join(f'"{p}"' for p in FUTURE_HEAD_PREFIXES) + "]",
                "ablation.future_prediction=true",
                "eval.recall_m=[" + ", ".join(repr(float(x)) for x in ms) + "]",
                "eval.recall_n=[" + ", ".join(str(n) for n in ns) + "]",
            ]
        )
        model = build_model(point_config)
        model.load_arrays(base_model.state_arrays())
        trainer = Trainer(
            point_config,
            train_streams,
            CheckpointManager(Path(run_root) / f"sweep_{a}_{b}"),
            model=model,
            weights=weights,
        )
        trainer.fit()
        report = evaluate(model, test_streams, point_config, weights, modes=(Mode.F,))[Mode.F]
        rows.append(
            {
                "a": float(a),
                "b": float(b),
                recall_key(1, m): report.recall(1, m),
                "SD": report.sd,
                "ED": report.ed,
                "matched": report.subsets["all"].matched_fraction,
            }
        )
    violations = sweep_violations(rows)
    for item in violations:
        logger.warning("trade-off sweep: %s", item)
    return SweepResult(rows, violations)
