"""AdamW with decoupled weight decay, global-norm clipping and the cosine schedule."""

import math
from typing import Dict, Iterator, Mapping, Sequence, Tuple

import numpy as np

from .errors import DomainError, OptimizerStateError
from .tensor import Parameter


class ModelParameters:
    """
    Named parameter tensors plus their AdamW state.

    The tensors are shared with the owning module; the moments and the step
    count belong to this object.
    """

    def __init__(self, tensors: Mapping[str, Parameter]):
        self.tensors: Dict[str, Parameter] = dict(tensors)
        self.first_moment = {n: np.zeros_like(t.data) for n, t in self.tensors.items()}
        self.second_moment = {n: np.zeros_like(t.data) for n, t in self.tensors.items()}
        self.step = 0

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self.tensors.items())

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.grad = None

    def subset(self, prefixes: Sequence[str]) -> "ModelParameters":
        """Parameters whose names start with any prefix; fresh optimizer state."""
        chosen = {n: t for n, t in self.tensors.items() if n.startswith(tuple(prefixes))}
        if not chosen:
            raise DomainError(f"no parameters match prefixes {list(prefixes)}")
        return ModelParameters(chosen)

    def grad_norm(self) -> float:
        total = 0.0
        for name, tensor in self.tensors.items():
            if tensor.grad is not None:
                total += float(np.sum(tensor.grad * tensor.grad))
        return math.sqrt(total)

    def optimizer_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.tensors:
            out[f"m/{name}"] = self.first_moment[name].copy()
            out[f"v/{name}"] = self.second_moment[name].copy()
        return out

    def load_optimizer_arrays(self, arrays: Mapping[str, np.ndarray], step: int) -> None:
        for name, tensor in self.tensors.items():
            for key, store in ((f"m/{name}", self.first_moment), (f"v/{name}", self.second_moment)):
                if key in arrays:
                    value = np.asarray(arrays[key], dtype=np.float64)
                    if value.shape != tensor.shape:
                        raise OptimizerStateError(f"{key}: shape {value.shape} != {tensor.shape}")
                    store[name] = value.copy()
        self.step = int(step)


def clip_grad_norm(params: ModelParameters, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = params.grad_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for tensor in params.tensors.values():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


def adamw_step(
    params: ModelParameters,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> ModelParameters:
    """Apply one AdamW update in place. Gradients are left for the caller to clear."""
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    missing = [name for name, t in params.tensors.items() if t.grad is None]
    if missing:
        raise OptimizerStateError(f"gradients missing for {len(missing)} parameters: {missing[:3]}")

    beta1, beta2 = betas
    params.step += 1
    correction1 = 1.0 - beta1**params.step
    correction2 = 1.0 - beta2**params.step
    for name, tensor in params.tensors.items():
        grad = tensor.grad
        m = params.first_moment[name]
        v = params.second_moment[name]
        tensor.data *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params


def cosine_learning_rate(
    base_lr: float, step: int, total_steps: int, min_ratio: float = 0.1
) -> float:
    """Cosine decay from ``base_lr`` to ``min_ratio * base_lr`` over ``total_steps``."""
    if total_steps <= 1:
        return base_lr
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def fill_missing_grads(params: ModelParameters) -> None:
    """Give parameters that received no gradient (an unused head) an explicit zero gradient."""
    for tensor in params.tensors.values():
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
