"""Parametric layers on top of :mod:`depmil.autograd`.

Layers take inputs shaped ``(B, K, d)`` (a batch of bags with K instances
each). Two-dimensional ``(K, d)`` input is accepted wherever it is
unambiguous and is treated as a single bag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """A layer or model configuration is internally inconsistent."""


class Module:
    """Container that discovers parameters from its attributes.

    Attributes are walked in assignment order, so parameter names and order
    are a pure function of how the module was constructed.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad and value.is_leaf:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 zero_bias: bool = False, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim, dtype)
        if not bias:
            self.bias = None
        elif zero_bias:
            self.bias = _param(np.zeros(out_dim), dtype)
        else:
            self.bias = uniform_fan_in(rng, (out_dim,), in_dim, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gain = _param(np.ones(dim), dtype)
        self.shift = _param(np.zeros(dim), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.shift, self.eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with ``num_heads`` parallel heads.

    The per-head attention matrices of the most recent forward pass are kept
    in ``last_attention`` with shape (B, heads, K, K).
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if num_heads < 1 or dim % num_heads:
            raise ConfigError(f"num_heads={num_heads} does not divide model dim {dim}")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng, dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, dtype=dtype)
        self.last_attention: np.ndarray | None = None

    def _heads(self, x: Tensor, b: int, k: int) -> Tensor:
        dh = self.dim // self.num_heads
        return ag.permute(ag.reshape(x, (b, k, self.num_heads, dh)), (0, 2, 1, 3))

    def forward(self, h: Tensor) -> Tensor:
        squeeze = h.ndim == 2
        if squeeze:
            h = ag.reshape(h, (1,) + h.shape)
        b, k, d = h.shape
        if d != self.dim:
            raise ag.ShapeError(f"attention expects dim {self.dim}, got input {h.shape}")
        q = self._heads(self.q_proj(h), b, k)
        kk = self._heads(self.k_proj(h), b, k)
        v = self._heads(self.v_proj(h), b, k)
        dh = d // self.num_heads
        scores = ag.scale(ag.matmul(q, ag.transpose(kk)), 1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        self.last_attention = attn.data
        mixed = ag.reshape(ag.permute(ag.matmul(attn, v), (0, 2, 1, 3)), (b, k, d))
        out = self.out_proj(mixed)
        return ag.reshape(out, (k, d)) if squeeze else out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.relu(self.fc1(x)))


class TransformerEncoderBlock(Module):
    """Self-attention plus feed-forward, each wrapped in a residual.

    ``norm="pre"``: x + f(LN(x)). ``norm="post"``: LN(x + f(x)).
    """

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator,
                 norm: str = "pre", dropout: float = 0.0, dtype=np.float32):
        if norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {norm!r}")
        self.dim = dim
        self.norm = norm
        self.dropout = dropout
        self.attn = MultiHeadSelfAttention(dim, num_heads, rng, dtype=dtype)
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, ffn_dim, rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.rng: np.random.Generator | None = None

    def _drop(self, x: Tensor) -> Tensor:
        if not self.training or self.dropout <= 0.0:
            return x
        return ag.dropout(x, self.dropout, self.rng)

    def forward(self, h: Tensor) -> Tensor:
        if self.norm == "pre":
            h = h + self._drop(self.attn(self.ln1(h)))
            return h + self._drop(self.ffn(self.ln2(h)))
        h = self.ln1(h + self._drop(self.attn(h)))
        return self.ln2(h + self._drop(self.ffn(h)))


class TransformerEncoder(Module):
    def __init__(self, dim: int, depth: int, num_heads: int, ffn_dim: int | None,
                 rng: np.random.Generator, norm: str = "pre", dropout: float = 0.0, dtype=np.float32):
        self.dim = dim
        self.blocks = [
            TransformerEncoderBlock(dim, num_heads, ffn_dim or dim, rng, norm, dropout, dtype)
            for _ in range(depth)
        ]

    def forward(self, h: Tensor) -> Tensor:
        for block in self.blocks:
            h = block(h)
        return h

    def attention_maps(self) -> list[np.ndarray]:
        return [b.attn.last_attention for b in self.blocks]


# -- backbones ---------------------------------------------------------------

@dataclass
class BackboneSpec:
    """Instance feature extractor.

    ``kind="mlp"`` consumes feature bags (B, K, in_dim); ``kind="conv"``
    consumes image bags (B, K, in_channels, H, W). Each stage output is one
    feature scale.
    """

    kind: str = "mlp"
    in_dim: int = 16
    in_channels: int = 3
    stage_dims: tuple[int, ...] = field(default_factory=lambda: (64,))

    def __post_init__(self):
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        if self.kind not in ("mlp", "conv"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if len(self.stage_dims) < 1:
            raise ConfigError("backbone needs at least one stage")

    @property
    def num_scales(self) -> int:
        return len(self.stage_dims)


class MLPBackbone(Module):
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32):
        dims = (spec.in_dim,) + spec.stage_dims
        self.in_dim = spec.in_dim
        self.stages = [Linear(dims[i], dims[i + 1], rng, dtype=dtype) for i in range(len(dims) - 1)]

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"feature bags must have dim {self.in_dim}, got {x.shape}")
        scales = []
        for stage in self.stages:
            x = ag.relu(stage(x))
            scales.append(x)
        return scales


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        fan_in = cin * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = uniform_fan_in(rng, (cout, cin, kernel, kernel), fan_in, dtype)
        self.bias = uniform_fan_in(rng, (cout,), fan_in, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvBackbone(Module):
    """Stride-2 3x3 conv stages; each stage is spatially mean-pooled into a scale."""

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32):
        chans = (spec.in_channels,) + spec.stage_dims
        self.in_channels = spec.in_channels
        self.stages = [
            Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1, dtype=dtype)
            for i in range(len(chans) - 1)
        ]

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 5 or x.shape[2] != self.in_channels:
            raise ag.ShapeError(
                f"image bags must be (B, K, {self.in_channels}, H, W), got {x.shape}"
            )
        b, k = x.shape[:2]
        y = ag.reshape(x, (b * k,) + x.shape[2:])
        scales = []
        for stage in self.stages:
            y = ag.relu(stage(y))
            pooled = ag.mean_pool(y, axis=(2, 3))
            scales.append(ag.reshape(pooled, (b, k, pooled.shape[-1])))
        return scales


def build_backbone(spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32) -> Module:
    if spec.kind == "mlp":
        return MLPBackbone(spec, rng, dtype)
    return ConvBackbone(spec, rng, dtype)
