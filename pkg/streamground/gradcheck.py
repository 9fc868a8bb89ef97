"""Central-difference verification of autodiff gradients."""

from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .errors import DomainError, EvaluationError
from .optim import ModelParameters
from .tensor import Tensor

Point = Union[ModelParameters, Mapping[str, Tensor], Sequence[Tensor]]


def _tensors(point: Point) -> Sequence[Tensor]:
    if isinstance(point, ModelParameters):
        return list(point.tensors.values())
    if isinstance(point, Mapping):
        return list(point.values())
    return list(point)


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = f().item()
    if not np.isfinite(value):
        raise EvaluationError(f"function evaluated to a non-finite value ({value})")
    return value


def grad_check(
    f: Callable[[], Tensor], point: Point, eps: float = 1e-5, abs_floor: float = 1e-8
) -> float:
    """
    Max relative error between autodiff and central-difference gradients.

    ``f`` is re-evaluated with every element of every tensor in ``point``
    nudged by +/-eps. Per element the error is
    |autodiff - numeric| / (|numeric| + 1e-12). Elements whose absolute
    disagreement is below ``abs_floor`` count as exact; a true zero gradient
    otherwise turns float round-off into a large ratio. Pass ``abs_floor=0``
    for the plain relative error.
    """
    if not 0 < eps <= 1e-3:
        raise DomainError(f"eps must be in (0, 1e-3], got {eps}")
    tensors = _tensors(point)
    for tensor in tensors:
        tensor.grad = None

    out = f()
    if not np.isfinite(out.item()):
        raise EvaluationError(f"function evaluated to a non-finite value ({out.item()})")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = _evaluate(f)
            flat[i] = original - eps
            minus = _evaluate(f)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            diff = abs(grad.reshape(-1)[i] - numeric)
            if diff < abs_floor:
                continue
            worst = max(worst, diff / (abs(numeric) + 1e-12))
    return worst
