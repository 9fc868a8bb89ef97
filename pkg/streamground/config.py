"""
Run configuration.

A ``RunConfig`` is a set of section dataclasses stored as one TOML file.
Unknown sections or keys are rejected, and every field documents its
default and where the value comes from. Values can be overridden with
dotted keys such as ``train.learning_rate=0.001`` (flag > file > default).
"""

import copy
import logging
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import toml

from .errors import ConfigError

logger = logging.getLogger(__name__)


def _opt(default: Any, help: str, origin: str = "chosen default") -> Any:
    if isinstance(default, list):
        return field(default_factory=lambda: copy.deepcopy(default), metadata={"help": help, "origin": origin})
    return field(default=default, metadata={"help": help, "origin": origin})


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class DataConfig:
    """Synthetic corpus generation."""

    train_streams: int = _opt(200, "number of training streams")
    test_streams: int = _opt(50, "number of test streams")
    stream_length: int = _opt(512, "frames per stream (T)")
    feature_dim: int = _opt(32, "feature dimension of every frame (d)")
    event_types: int = _opt(5, "number of event types (E)")
    noise: float = _opt(0.3, "Gaussian noise level added to every frame")
    duration_min: int = _opt(2, "shortest planted event, frames (log-uniform)")
    duration_max: int = _opt(128, "longest planted event, frames (log-uniform)")
    gap_min: int = _opt(8, "shortest gap between planted events, frames")
    gap_max: int = _opt(64, "longest gap between planted events, frames")
    ordinal_fraction: float = _opt(0.3, "share of queries that ask for the second occurrence")
    ordinal_gap_min: int = _opt(128, "minimum frames between first and second occurrence")
    seed: int = _opt(0, "corpus seed")

    def __post_init__(self):
        _require(self.train_streams >= 1 and self.test_streams >= 1, "data: need >= 1 stream per split")
        _require(self.stream_length >= 8, "data.stream_length must be >= 8")
        _require(self.feature_dim >= 4, "data.feature_dim must be >= 4")
        _require(1 <= self.event_types <= self.feature_dim, "data.event_types must be in [1, feature_dim]")
        _require(self.noise >= 0, "data.noise must be non-negative")
        _require(1 <= self.duration_min <= self.duration_max, "data: need 1 <= duration_min <= duration_max")
        _require(0 <= self.gap_min <= self.gap_max, "data: need 0 <= gap_min <= gap_max")
        _require(0.0 <= self.ordinal_fraction <= 1.0, "data.ordinal_fraction must be in [0, 1]")
        _require(self.ordinal_gap_min >= 0, "data.ordinal_gap_min must be non-negative")


@dataclass
class ModelConfig:
    """Model architecture and memory layout."""

    dim: int = _opt(32, "model width")
    hidden: int = _opt(64, "hidden width of every MLP")
    heads: int = _opt(1, "attention heads")
    kernel: int = _opt(3, "causal convolution taps")
    window: int = _opt(8, "short-term window length, frames (power of two)", "published setting")
    scales: int = _opt(8, "number of proposal scales (L)", "published setting")
    memory_size: int = _opt(64, "total event memory capacity (K)", "published setting")
    delta: float = _opt(0.8, "cosine similarity above which adjacent memory events merge")
    per_scale_attention: bool = _opt(False, "refine each scale only against the same scale of memory")
    seed: int = _opt(0, "parameter initialization seed")

    def __post_init__(self):
        _require(self.dim >= 2 and self.hidden >= 1, "model: dim must be >= 2 and hidden >= 1")
        _require(self.heads >= 1 and self.dim % self.heads == 0, "model.dim must be divisible by model.heads")
        _require(self.kernel >= 1, "model.kernel must be >= 1")
        _require(self.window >= 1 and self.window & (self.window - 1) == 0, "model.window must be a power of two")
        _require(
            self.scales >= self.window.bit_length(),
            f"model.scales must be >= log2(window) + 1 = {self.window.bit_length()}",
        )
        _require(self.memory_size >= self.scales, "model.memory_size must be >= model.scales")


@dataclass
class TrainConfig:
    """Optimization and supervision."""

    learning_rate: float = _opt(2e-3, "peak AdamW learning rate", "published setting")
    epochs: int = _opt(20, "training epochs")
    weight_decay: float = _opt(0.01, "decoupled AdamW weight decay")
    grad_clip: float = _opt(5.0, "global gradient-norm clip (0 disables)")
    min_lr_ratio: float = _opt(0.1, "cosine schedule floor as a fraction of the peak")
    theta_pos: float = _opt(0.5, "IoU at which a proposal counts as positive")
    focal_alpha: float = _opt(0.25, "focal loss alpha")
    focal_gamma: float = _opt(2.0, "focal loss gamma")
    future_a: int = _opt(-4, "future window start offset a, frames", "published setting")
    future_b: int = _opt(4, "future window end offset b, frames", "published setting")
    accumulate_streams: int = _opt(1, "streams per optimizer step")
    force_best_positive: bool = _opt(True, "label the best-IoU proposal positive when none clears theta_pos")
    checkpoint_every: int = _opt(5, "epochs between checkpoints (0 disables)")
    trainable_prefixes: List[str] = _opt([], "train only parameters with these name prefixes (empty = all)")
    seed: int = _opt(0, "stream order shuffling seed")

    def __post_init__(self):
        _require(self.learning_rate >= 0, "train.learning_rate must be non-negative")
        _require(self.epochs >= 1, "train.epochs must be >= 1")
        _require(self.weight_decay >= 0 and self.grad_clip >= 0, "train: decay and clip must be >= 0")
        _require(0.0 <= self.min_lr_ratio <= 1.0, "train.min_lr_ratio must be in [0, 1]")
        _require(0.0 < self.theta_pos <= 1.0, "train.theta_pos must be in (0, 1]")
        _require(0.0 < self.focal_alpha < 1.0 and self.focal_gamma >= 0, "train: invalid focal parameters")
        _require(self.future_a <= self.future_b, "train.future_a must be <= train.future_b")
        _require(self.accumulate_streams >= 1, "train.accumulate_streams must be >= 1")
        _require(self.checkpoint_every >= 0, "train.checkpoint_every must be >= 0")


@dataclass
class EngineConfig:
    """Online inference."""

    tau_cls: float = _opt(0.5, "proposal probability needed to emit a candidate")
    tau_f: float = _opt(0.5, "future probability needed to fire a start")
    horizon: int = _opt(256, "frames a start firing waits for a matching proposal")
    pair_tolerance: float = _opt(2.0, "frames of slack when matching a start to a proposal")
    mode: str = _opt("both", "emitted prediction modes: E, F or both")
    top_n: int = _opt(5, "predictions kept per query after suppression")
    nms_iou: float = _opt(0.5, "IoU at which a lower-scored candidate is suppressed")

    def __post_init__(self):
        _require(0.0 <= self.tau_cls <= 1.0 and 0.0 <= self.tau_f <= 1.0, "engine: thresholds must be in [0, 1]")
        _require(self.horizon >= 1, "engine.horizon must be >= 1")
        _require(self.pair_tolerance >= 0, "engine.pair_tolerance must be >= 0")
        _require(self.mode in ("E", "F", "both"), f"engine.mode must be E, F or both, got {self.mode!r}")
        _require(self.top_n >= 1, "engine.top_n must be >= 1")
        _require(0.0 < self.nms_iou <= 1.0, "engine.nms_iou must be in (0, 1]")


@dataclass
class EvalConfig:
    """Metrics, ablation and sweep."""

    recall_n: List[int] = _opt([1, 5], "n values for R@n")
    recall_m: List[float] = _opt([0.3, 0.5, 0.7], "IoU thresholds m for R@n,IoU=m")
    m_match: float = _opt(0.5, "IoU the top-1 prediction needs to count towards SD/ED")
    sweep_points: List[List[int]] = _opt(
        [[0, 0], [-2, 2], [-4, 4], [-8, 8], [-16, 16]], "(a, b) future windows for the trade-off sweep"
    )
    sweep_epochs: int = _opt(3, "epochs used to retrain the future head per sweep point")

    def __post_init__(self):
        _require(self.recall_n and all(n >= 1 for n in self.recall_n), "eval.recall_n must be positive")
        _require(self.recall_m and all(0 < m <= 1 for m in self.recall_m), "eval.recall_m must be in (0, 1]")
        _require(0.0 < self.m_match <= 1.0, "eval.m_match must be in (0, 1]")
        _require(
            all(len(p) == 2 and p[0] <= p[1] for p in self.sweep_points),
            "eval.sweep_points must be [a, b] pairs with a <= b",
        )
        _require(self.sweep_epochs >= 1, "eval.sweep_epochs must be >= 1")


@dataclass
class AblationConfig:
    """Component switches."""

    memory: str = _opt("event", "event (hierarchical) or frame_fifo memory")
    dynamic_size: bool = _opt(True, "size per-scale memory from positive-event frequencies")
    adaptive_update: bool = _opt(True, "merge similar adjacent events instead of evicting")
    future_prediction: bool = _opt(True, "train and use the future-start branch")

    def __post_init__(self):
        _require(self.memory in ("event", "frame_fifo"), f"ablation.memory must be event or frame_fifo, got {self.memory!r}")


@dataclass
class PathsConfig:
    data_dir: str = _opt("data", "corpus directory")
    run_dir: str = _opt("", "training run directory (empty = per-user data directory)")
    output_dir: str = _opt("outputs", "emission logs and reports")


SECTIONS: Dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "engine": EngineConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        sections = {}
        for name, section_cls in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name: f for f in fields(section_cls)}
            extra = sorted(set(values) - set(known))
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {extra}")
            coerced = {k: _coerce(f"{name}.{k}", v, _default_of(known[k])) for k, v in values.items()}
            try:
                sections[name] = section_cls(**coerced)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**sections)

    def to_toml(self) -> str:
        return toml.dumps(self.to_dict())

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_toml(), encoding="utf-8")
        return path

    def get_value(self, key: str) -> Any:
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        """New config with ``section.key=value`` assignments applied."""
        raw = self.to_dict()
        for item in overrides:
            key, sep, text = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            section, name = _split_key(key.strip())
            raw[section][name] = parse_value(text.strip())
        return RunConfig.from_dict(raw)


def _split_key(key: str) -> Tuple[str, str]:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {key!r}; expected one of the section.key names")
    section, name = parts
    if name not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def _default_of(f) -> Any:
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def parse_value(text: str) -> Any:
    """Parse a TOML literal; bare words fall back to strings."""
    try:
        return toml.loads(f"value = {text}")["value"]
    except (toml.TomlDecodeError, IndexError):
        return text


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return value
    return value


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the TOML file (if any), then the overrides."""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = toml.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
        logger.debug("loaded config from %s", path)
    return RunConfig.from_dict(raw).with_overrides(overrides)


def describe_fields() -> Iterator[Tuple[str, Any, str, str]]:
    """(dotted key, default, help, origin) for every config field."""
    for section, section_cls in SECTIONS.items():
        for f in fields(section_cls):
            yield f"{section}.{f.name}", _default_of(f), f.metadata.get("help", ""), f.metadata.get("origin", "")
