"""
StreamGround - online temporal grounding over feature streams

This package localizes moments described by short token queries in an
unbounded stream of frame features, emitting predictions as frames arrive.
"""

# Import environment setup BEFORE numpy so thread limits take effect
from . import _env_setup

from ._version import __version__

__description__ = "Online temporal grounding over feature streams"

from .config import RunConfig, load_config
from .engine import FeatureFrame, Mode, Prediction, StreamingEngine
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    DomainError,
    EvaluationError,
    GenerationError,
    MalformedInputError,
    OptimizerStateError,
    ShapeError,
    SpecError,
    StreamGroundError,
    StreamOrderError,
    TrainingError,
    VocabularyError,
)
from .intervals import frame_iou, iou
from .memory import FrameFifoMemory, HierarchicalMemory, ScaleWeights, allocate_sizes
from .model import GroundingModel, QueryTask
from .proposals import EventProposal, ProposalTree, span_of
from .synthetic import StreamSpec, Vocabulary, generate_stream

__all__ = [
    "__version__",
    "__description__",
    # Core classes
    "RunConfig",
    "load_config",
    "FeatureFrame",
    "Mode",
    "Prediction",
    "StreamingEngine",
    "GroundingModel",
    "QueryTask",
    "EventProposal",
    "ProposalTree",
    "span_of",
    "HierarchicalMemory",
    "FrameFifoMemory",
    "ScaleWeights",
    "allocate_sizes",
    "StreamSpec",
    "Vocabulary",
    "generate_stream",
    "iou",
    "frame_iou",
    # Errors
    "StreamGroundError",
    "ShapeError",
    "StreamOrderError",
    "DomainError",
    "CapacityError",
    "VocabularyError",
    "OptimizerStateError",
    "EvaluationError",
    "SpecError",
    "GenerationError",
    "ConfigError",
    "CheckpointError",
    "MalformedInputError",
    "TrainingError",
]
