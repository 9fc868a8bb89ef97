"""
Versioned checkpoint containers and run-directory management.

Containers are sorted-key JSON documents holding named tensors (shape +
row-major values) and free-form metadata. Python's float repr round-trips
exactly, so saving the same state twice yields identical bytes.
"""

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import platformdirs

from .errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_NAME = "streamground-container"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Container:
    """Contents of one checkpoint file."""

    kind: str
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.kind:
            raise CheckpointError("container kind must be non-empty")


def _encode(container: Container) -> str:
    tensors = {
        name: {"shape": list(array.shape), "data": np.asarray(array, dtype=np.float64).reshape(-1).tolist()}
        for name, array in container.tensors.items()
    }
    document = {
        "format": FORMAT_NAME,
        "format_version": container.format_version,
        "kind": container.kind,
        "metadata": container.metadata,
        "tensors": tensors,
    }
    return json.dumps(document, sort_keys=True, separators=(",", ":")) + "\n"


def save_container(path: PathLike, container: Container) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(_encode(container), encoding="utf-8")
    tmp.replace(path)
    logger.debug("wrote %s container with %d tensors to %s", container.kind, len(container.tensors), path)
    return path


def load_container(path: PathLike, expected_kind: Optional[str] = None) -> Container:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc

    if not isinstance(document, dict) or document.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} file")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    kind = document.get("kind", "")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: holds a '{kind}' container, expected '{expected_kind}'")

    tensors = {}
    for name, entry in document.get("tensors", {}).items():
        try:
            array = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: tensor '{name}' is malformed: {exc}") from exc
        tensors[name] = array
    return Container(kind=kind, tensors=tensors, metadata=document.get("metadata", {}))


def fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    """Content hash of named arrays, independent of insertion order."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name], dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


@dataclass
class CheckpointInfo:
    """Summary of a checkpoint file in a run directory."""

    path: Path
    epoch: int
    size_bytes: int


class CheckpointManager:
    """Manages the checkpoints and logs of one training run."""

    CHECKPOINT_PREFIX = "checkpoint-epoch"

    def __init__(self, run_dir: Optional[PathLike] = None):
        if run_dir:
            self.run_dir = Path(run_dir)
        else:
            # Linux: ~/.local/share/streamground/runs/default
            self.run_dir = Path(platformdirs.user_data_dir("streamground")) / "runs" / "default"
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, epoch: int) -> Path:
        return self.run_dir / f"{self.CHECKPOINT_PREFIX}{epoch:04d}.json"

    @property
    def final_path(self) -> Path:
        return self.run_dir / "model.json"

    @property
    def log_path(self) -> Path:
        return self.run_dir / "train_log.csv"

    def list_checkpoints(self) -> List[CheckpointInfo]:
        infos = []
        for path in sorted(self.run_dir.glob(f"{self.CHECKPOINT_PREFIX}*.json")):
            epoch = int(path.stem[len(self.CHECKPOINT_PREFIX):])
            infos.append(CheckpointInfo(path=path, epoch=epoch, size_bytes=path.stat().st_size))
        return infos

    def latest(self) -> Optional[Path]:
        if self.final_path.exists():
            return self.final_path
        checkpoints = self.list_checkpoints()
        return checkpoints[-1].path if checkpoints else None

    def clear(self) -> None:
        if self.run_dir.exists():
            shutil.rmtree(self.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
