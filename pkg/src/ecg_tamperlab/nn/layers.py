"""Layer vocabulary: parameter containers with forward, shape and cost rules.

Shapes passed to ``output_shape``/``cost`` exclude the batch axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, add, gelu, linear, matmul, no_grad, relu, reshape, sigmoid, softmax, tmean, transpose


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    macs: int
    elementwise: int
    output_shape: tuple[int, ...]

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


def _activate(x: Tensor, kind: str | None) -> Tensor:
    if kind is None or kind == "linear":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    """Fan-in scaled uniform: U(-gain*sqrt(3/fan_in), +gain*sqrt(3/fan_in))."""
    limit = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _gain(activation: str | None) -> float:
    return math.sqrt(2.0) if activation == "relu" else 1.0


class Module:
    training = True
    kind = "module"

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def cost(self, shape: tuple[int, ...], name: str = "") -> list[LayerCost]:
        return []

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def cost(self, shape, name=""):
        out: list[LayerCost] = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.cost(shape, f"{name}.{i}" if name else str(i)))
            shape = layer.output_shape(shape)
        return out


class Conv1D(Module):
    kind = "conv1d"

    def __init__(self, ch_in: int, ch_out: int, kernel: int, rng: np.random.Generator,
                 activation: str | None = None, dtype=np.float32, bias: bool = True):
        if kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        self.ch_in, self.ch_out, self.kernel = ch_in, ch_out, kernel
        self.activation = activation
        fan_in = kernel * ch_in
        self.weight = Parameter(uniform_init(rng, (kernel, ch_in, ch_out), fan_in, _gain(activation), dtype))
        self.bias = Parameter(np.zeros(ch_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return _activate(ops.conv1d_same(x, self.weight, self.bias), self.activation)

    def output_shape(self, shape):
        t, c = shape
        if c != self.ch_in:
            raise ValueError(f"conv1d expects {self.ch_in} channels, got {c}")
        return (t, self.ch_out)

    def cost(self, shape, name=""):
        t, _ = self.output_shape(shape)
        macs = t * self.ch_out * self.kernel * self.ch_in
        act = t * self.ch_out if self.activation else 0
        return [LayerCost(name, self.kind, macs, act, (t, self.ch_out))]


class Dense(Module):
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 activation: str | None = None, dtype=np.float32):
        self.d_in, self.d_out, self.activation = d_in, d_out, activation
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in, _gain(activation), dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return _activate(linear(x, self.weight, self.bias), self.activation)

    def output_shape(self, shape):
        if shape[-1] != self.d_in:
            raise ValueError(f"dense expects last dim {self.d_in}, got {shape[-1]}")
        return (*shape[:-1], self.d_out)

    def cost(self, shape, name=""):
        out = self.output_shape(shape)
        positions = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        macs = positions * self.d_in * self.d_out
        act = positions * self.d_out if self.activation else 0
        return [LayerCost(name, self.kind, macs, act, out)]


class BatchNorm1D(Module):
    kind = "batchnorm"
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)

    def cost(self, shape, name=""):
        return [LayerCost(name, self.kind, 0, int(np.prod(shape)), shape)]


def precise_batch_norm(module: Module, batches: Iterable[Tensor]) -> int:
    """Re-estimate every batch-norm layer's running statistics as seen at inference.

    Dropout sits in front of batch norm in the convolutional stacks, so the
    moving averages collected during training describe activations whose
    variance is inflated by the dropout mask. Here each batch is pushed
    through with dropout off (normalising with batch statistics, as in
    training) and the per-batch moments are pooled into exact population
    moments. Returns the number of items seen.
    """
    bns = [m for m in module.modules() if isinstance(m, BatchNorm1D)]
    if not bns:
        return 0
    was_training = module.training
    momenta = [b.momentum for b in bns]
    first = [np.zeros_like(b.running_mean, dtype=np.float64) for b in bns]
    second = [np.zeros_like(b.running_var, dtype=np.float64) for b in bns]
    module.train(True)
    for m in module.modules():
        if isinstance(m, Dropout):
            m.training = False
    seen = 0
    try:
        for b in bns:
            b.momentum = 0.0
        with no_grad():
            for xb in batches:
                module(xb)
                # with momentum 0 the running buffers hold this batch's moments; every item
                # contributes the same number of positions to a given layer, so items are the weights
                n_items = xb.shape[0]
                for i, b in enumerate(bns):
                    mean = b.running_mean.astype(np.float64)
                    first[i] += n_items * mean
                    second[i] += n_items * (b.running_var + mean ** 2)
                seen += n_items
        if seen:
            for i, b in enumerate(bns):
                mean = first[i] / seen
                b.running_mean[...] = mean
                b.running_var[...] = np.maximum(second[i] / seen - mean ** 2, 0.0)
    finally:
        for b, mom in zip(bns, momenta):
            b.momentum = mom
        module.train(was_training)
    return seen


class MaxPool1D(Module):
    kind = "maxpool1d"

    def __init__(self, pool: int = 2):
        self.pool = pool

    def forward(self, x):
        return ops.max_pool1d(x, self.pool)

    def output_shape(self, shape):
        t, c = shape
        return (t // self.pool, c)

    def cost(self, shape, name=""):
        return [LayerCost(name, self.kind, 0, int(np.prod(shape)), self.output_shape(shape))]


class Dropout(Module):
    kind = "dropout"

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self._rng = rng

    def forward(self, x):
        return ops.dropout(x, self.rate, self._rng, self.training)


class Activation(Module):
    kind = "activation"

    def __init__(self, fn: str):
        self.fn = fn

    def forward(self, x):
        return _activate(x, self.fn)

    def cost(self, shape, name=""):
        return [LayerCost(name, f"{self.kind}:{self.fn}", 0, int(np.prod(shape)), shape)]


class LayerNorm(Module):
    kind = "layernorm"

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)

    def cost(self, shape, name=""):
        return [LayerCost(name, self.kind, 0, int(np.prod(shape)), shape)]


class Flatten(Module):
    kind = "flatten"

    def forward(self, x):
        return reshape(x, (x.shape[0], -1))

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class GlobalAvgPool(Module):
    """Mean over the time axis: (batch, time, d) -> (batch, d)."""

    kind = "global_avg_pool"

    def forward(self, x):
        if x.shape[1] == 0:
            raise ValueError("empty time axis")
        return tmean(x, axis=1)

    def output_shape(self, shape):
        return (shape[-1],)

    def cost(self, shape, name=""):
        return [LayerCost(name, self.kind, 0, int(np.prod(shape)), self.output_shape(shape))]


def positional_encoding(time: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...)."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(time, dtype=np.float64)[:, None]
    rates = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((time, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe.astype(dtype)


class PositionalEncoding(Module):
    kind = "positional_encoding"

    def __init__(self, d_model: int):
        if d_model % 2:
            raise ValueError(f"d_model must be even, got {d_model}")
        self.d_model = d_model
        self._cache: dict[tuple[int, str], np.ndarray] = {}

    def forward(self, x):
        key = (x.shape[1], x.dtype.str)
        if key not in self._cache:
            self._cache[key] = positional_encoding(x.shape[1], self.d_model, x.dtype)
        return add(x, Tensor(self._cache[key]))

    def cost(self, shape, name=""):
        return [LayerCost(name, self.kind, 0, int(np.prod(shape)), shape)]


def multi_head_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int, head_dim: int,
                         return_weights: bool = False):
    """Scaled dot-product self-attention over (batch, time, d_model).

    Per head: softmax(Q K^T / sqrt(head_dim)) V; heads are concatenated and
    mapped back to d_model by the output projection.
    """
    b, t, _ = x.shape

    def split(z):
        return transpose(reshape(z, (b, t, heads, head_dim)), (0, 2, 1, 3))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = linear(reshape(ctx, (b, t, heads * head_dim)), wo, bo)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """Self-attention; the key bias is omitted by default since softmax rows ignore it."""

    kind = "attention"

    def __init__(self, d_model: int, heads: int, head_dim: int, rng: np.random.Generator,
                 dtype=np.float32, key_bias: bool = False):
        self.d_model, self.heads, self.head_dim = d_model, heads, head_dim
        inner = heads * head_dim
        self.wq = Parameter(uniform_init(rng, (d_model, inner), d_model, 1.0, dtype))
        self.bq = Parameter(np.zeros(inner, dtype=dtype))
        self.wk = Parameter(uniform_init(rng, (d_model, inner), d_model, 1.0, dtype))
        self.bk = Parameter(np.zeros(inner, dtype=dtype)) if key_bias else None
        self.wv = Parameter(uniform_init(rng, (d_model, inner), d_model, 1.0, dtype))
        self.bv = Parameter(np.zeros(inner, dtype=dtype))
        self.wo = Parameter(uniform_init(rng, (inner, d_model), inner, 1.0, dtype))
        self.bo = Parameter(np.zeros(d_model, dtype=dtype))

    def _params(self):
        return (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo)

    def forward(self, x):
        return multi_head_attention(x, *self._params(), heads=self.heads, head_dim=self.head_dim)

    def attention_weights(self, x: Tensor) -> np.ndarray:
        _, w = multi_head_attention(x, *self._params(), heads=self.heads, head_dim=self.head_dim,
                                    return_weights=True)
        return w.data

    def output_shape(self, shape):
        if shape[-1] != self.d_model:
            raise ValueError(f"attention expects d_model {self.d_model}, got {shape[-1]}")
        return shape

    def cost(self, shape, name=""):
        t, d = shape
        inner = self.heads * self.head_dim
        proj = 3 * t * d * inner + t * inner * d
        mixing = 2 * t * t * self.head_dim * self.heads
        softmax_elems = self.heads * t * t
        return [LayerCost(name, self.kind, proj + mixing, softmax_elems, shape)]


class Residual(Module):
    """``post(inner(x) + shortcut(x))``; shortcut defaults to identity."""

    kind = "residual"

    def __init__(self, inner: Module, shortcut: Module | None = None, post: str | None = None):
        self.inner = inner
        self.shortcut = shortcut
        self.post = post

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return _activate(add(self.inner(x), skip), self.post)

    def output_shape(self, shape):
        out = self.inner.output_shape(shape)
        skip = shape if self.shortcut is None else self.shortcut.output_shape(shape)
        if tuple(out) != tuple(skip):
            raise ValueError(f"residual branch shape {out} does not match shortcut {skip}")
        return out

    def cost(self, shape, name=""):
        costs = self.inner.cost(shape, f"{name}.inner")
        if self.shortcut is not None:
            costs += self.shortcut.cost(shape, f"{name}.shortcut")
        out = self.output_shape(shape)
        n = int(np.prod(out))
        costs.append(LayerCost(f"{name}.add", "residual_add", 0, n * (2 if self.post else 1), out))
        return costs


def count_parameters(modules: Sequence[Module]) -> int:
    return sum(m.num_parameters() for m in modules)
