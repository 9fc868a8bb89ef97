"""
Neural network building blocks on top of the autodiff tensor.

Layers are ``Module`` subclasses that own ``Parameter`` leaves; parameters
are discovered by walking instance attributes in definition order, which
fixes their names and iteration order for checkpoints and the optimizer.
"""

import math
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import Parameter, Tensor, TensorLike, as_tensor, concat, layer_norm, softmax


class Module:
    """Base class for anything that owns parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> "ModelParameters":
        from .optim import ModelParameters

        return ModelParameters(dict(self.named_parameters()))

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy stored arrays into the parameters; names and shapes must match exactly."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names differ: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, param in own.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(f"{name}: stored shape {value.shape} != {param.shape}")
            param.data[...] = value

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.grad = None


class Linear(Module):
    """y = x W + b, with W stored (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Two-layer perceptron with a ReLU in between."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-9):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.eps) * self.gamma + self.beta


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    def __call__(self, ids: Sequence[int]) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.int64)]


def attention(queries: TensorLike, keys: TensorLike, values: TensorLike) -> Tensor:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V."""
    q, k, v = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-D queries, keys and values")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or q.shape[1] == 0:
        raise ShapeError(f"attention shape mismatch: q={q.shape} k={k.shape} v={v.shape}")
    if q.shape[0] == 0 or k.shape[0] == 0:
        raise ShapeError("attention needs at least one query and one key")
    weights = softmax((q @ k.T) * (1.0 / math.sqrt(q.shape[1])), axis=-1)
    return weights @ v


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ShapeError(f"dim {dim} is not divisible into {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        q, k, v = self.q_proj(x), self.k_proj(context), self.v_proj(context)
        if self.heads == 1:
            return self.out_proj(attention(q, k, v))
        width = q.shape[1] // self.heads
        outputs = []
        for h in range(self.heads):
            cols = slice(h * width, (h + 1) * width)
            outputs.append(attention(q[:, cols], k[:, cols], v[:, cols]))
        return self.out_proj(concat(outputs, axis=1))


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer; ``memory`` rows are appended to the keys and values."""

    def __init__(self, dim: int, hidden: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, dim, rng)

    def __call__(self, x: Tensor, memory: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        if memory is None or memory.shape[0] == 0:
            context = h
        else:
            context = concat([h, self.norm1(memory)], axis=0)
        x = x + self.attn(h, context)
        return x + self.mlp(self.norm2(x))


class TransformerDecoderLayer(Module):
    """Pre-norm decoder layer: self-attention, cross-attention, MLP."""

    def __init__(self, dim: int, hidden: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, dim, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        if context.shape[0] == 0:
            raise ShapeError("decoder cross-attention needs a non-empty context")
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), context)
        return x + self.mlp(self.norm3(x))


def causal_conv1d(
    frames: TensorLike, weight: TensorLike, bias: TensorLike, history: np.ndarray
) -> Tensor:
    """
    1-D convolution where output row t sees input rows t-k+1..t only.

    ``history`` holds the k-1 raw rows preceding ``frames`` (zeros at stream
    start); ``weight`` is (k * in_dim, out_dim) with the oldest tap first.
    """
    x = as_tensor(frames)
    if x.ndim != 2:
        raise ShapeError(f"causal_conv1d expects (n, in_dim) frames, got {x.shape}")
    taps = history.shape[0] + 1
    if history.ndim != 2 or history.shape[1] != x.shape[1]:
        raise ShapeError(f"history shape {history.shape} does not match frames {x.shape}")
    n = x.shape[0]
    padded = concat([Tensor(history), x], axis=0) if taps > 1 else x
    stacked = concat([padded[i : i + n] for i in range(taps)], axis=1)
    return stacked @ as_tensor(weight) + as_tensor(bias)


class CausalConv1d(Module):
    def __init__(self, in_dim: int, out_dim: int, kernel: int, rng: np.random.Generator):
        if kernel < 1:
            raise ShapeError("kernel size must be positive")
        bound = 1.0 / math.sqrt(kernel * in_dim)
        self.kernel = kernel
        self.in_dim = in_dim
        self.weight = Parameter(rng.uniform(-bound, bound, size=(kernel * in_dim, out_dim)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_dim,)))

    def initial_history(self) -> np.ndarray:
        return np.zeros((self.kernel - 1, self.in_dim))

    def __call__(self, frames: TensorLike, history: np.ndarray) -> Tensor:
        return causal_conv1d(frames, self.weight, self.bias, history)


def sinusoidal_encoding(positions: Sequence[float], dim: int) -> np.ndarray:
    """Fixed sin/cos encoding of (possibly fractional, possibly negative) positions."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = pos * freqs.reshape(1, -1)
    out = np.zeros((pos.shape[0], dim))
    out[:, 0 : 2 * half : 2] = np.sin(angles)
    out[:, 1 : 2 * half : 2] = np.cos(angles)
    return out

