import hashlib
import math
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from core.errors import ShapeMismatchError
from core.nn import functional as F
from core.nn.tensor import Param, Tensor, get_default_dtype

INIT_SCHEME = "fan_in_uniform"


def init_uniform(name: str, shape: Tuple[int, ...], fan_in: int, seed: int) -> np.ndarray:
    """
    Fan-in scaled uniform values in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    The stream is derived from (seed, name) only, so a parameter's initial value
    does not depend on which other layers exist.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    rng = np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Module:
    """Base class: parameters are discovered from attributes (Params, Modules, lists of Modules)."""

    def named_params(self) -> Dict[str, Param]:
        found: Dict[str, Param] = {}
        for value in vars(self).values():
            for item in value if isinstance(value, (list, tuple)) else (value,):
                if isinstance(item, Param):
                    found[item.name] = item
                elif isinstance(item, Module):
                    found.update(item.named_params())
        return dict(sorted(found.items()))

    def parameters(self) -> Iterable[Param]:
        return self.named_params().values()

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ShapeMismatchError(f"checkpoint is missing parameters {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeMismatchError(f"parameter {name} has shape {p.shape}, checkpoint holds {value.shape}")
            p.tensor.data = value.astype(p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, name: str, in_features: int, out_features: int, seed: int = 0):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(f"{name}.weight", init_uniform(f"{name}.weight", (in_features, out_features), in_features, seed))
        self.bias = Param(f"{name}.bias", init_uniform(f"{name}.bias", (out_features,), in_features, seed))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeMismatchError(f"linear layer expects {self.in_features} features, got {x.shape[-1]}")
        return x @ self.weight.tensor + self.bias.tensor


class Conv2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: Optional[int] = None, seed: int = 0):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_channels * kernel * kernel
        self.weight = Param(f"{name}.weight", init_uniform(f"{name}.weight", (kernel, kernel, in_channels, out_channels), fan_in, seed))
        self.bias = Param(f"{name}.bias", init_uniform(f"{name}.bias", (out_channels,), fan_in, seed))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int = 2,
                 stride: int = 2, padding: int = 0, seed: int = 0):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel // (stride * stride)
        self.weight = Param(f"{name}.weight", init_uniform(f"{name}.weight", (kernel, kernel, in_channels, out_channels), fan_in, seed))
        self.bias = Param(f"{name}.bias", init_uniform(f"{name}.bias", (out_channels,), fan_in, seed))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride, padding=self.padding)


class PositionalEmbedding(Module):
    """Learned additive embedding, one row per token position."""

    def __init__(self, name: str, tokens: int, dim: int, seed: int = 0):
        self.table = Param(f"{name}.table", init_uniform(f"{name}.table", (tokens, dim), dim, seed))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape != self.table.shape:
            raise ShapeMismatchError(f"positional embedding is {self.table.shape}, tokens are {x.shape}")
        return x + self.table.tensor


class MultiHeadSelfAttention(Module):
    """
    Self-attention over an (L, C) token matrix.

    Dense form: softmax(QK^T / sqrt(C/heads) + mask * -1e9) V per head, heads concatenated
    and output-projected. Sparse form attends only over an explicit list of (row, col) pairs.
    """

    def __init__(self, name: str, dim: int, heads: int, seed: int = 0, out_dim: Optional[int] = None):
        if dim % heads != 0:
            raise ShapeMismatchError(f"attention width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(f"{name}.query", dim, dim, seed)
        self.key = Linear(f"{name}.key", dim, dim, seed)
        self.value = Linear(f"{name}.value", dim, dim, seed)
        self.out = Linear(f"{name}.out", dim, out_dim or dim, seed)

    def _split(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], self.heads, self.head_dim)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None, return_weights: bool = False):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatchError(f"attention expects (L, {self.dim}) tokens, got {x.shape}")
        length = x.shape[0]
        q = self._split(self.query(x)).transpose(1, 0, 2)
        k = self._split(self.key(x)).transpose(1, 2, 0)
        v = self._split(self.value(x)).transpose(1, 0, 2)
        scores = (q @ k) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask), (self.heads, length, length))
        weights = F.softmax(scores, axis=-1, mask=mask)
        mixed = (weights @ v).transpose(1, 0, 2).reshape(length, self.dim)
        out = self.out(mixed)
        return (out, weights) if return_weights else out

    def sparse(self, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """
        Attention restricted to pairs (rows[p], cols[p]). Work is proportional to the
        number of pairs; every row must appear at least once.
        """
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatchError(f"attention expects (L, {self.dim}) tokens, got {x.shape}")
        length = x.shape[0]
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = (F.take(q, rows) * F.take(k, cols)).sum(axis=-1) * (1.0 / math.sqrt(self.head_dim))
        weights = F.segment_softmax(scores, rows, length)
        mixed = F.segment_sum(weights.reshape(len(rows), self.heads, 1) * F.take(v, cols), rows, length)
        return self.out(mixed.reshape(length, self.dim))
