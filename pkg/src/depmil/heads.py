"""Bag classifiers: Max, Attention, Gated-Attention, Transformer and
Pyramid-Transformer MIL.

Every model maps a batch of bags to a :class:`BagOutput` carrying bag logits,
per-instance logits, attention weights over instances and the instance
embeddings the pooling consumed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import (
    BackboneSpec,
    ConfigError,
    Linear,
    Module,
    TransformerEncoder,
    build_backbone,
)

VARIANTS = ("max", "attention", "gated_attention", "transformer", "pyramid_transformer")


@dataclass
class MilHeadSpec:
    variant: str = "attention"
    attn_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    num_classes: int = 6
    ffn_dim: int | None = None
    norm: str = "pre"
    dropout: float = 0.0
    instance_head: str = "shared"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown MIL variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.depth < 0:
            raise ConfigError("encoder depth must be >= 0")
        if self.instance_head not in ("shared", "separate"):
            raise ConfigError(f"instance_head must be 'shared' or 'separate', got {self.instance_head!r}")


@dataclass
class ModelSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: MilHeadSpec = field(default_factory=MilHeadSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stage_dims"] = list(self.backbone.stage_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(backbone=BackboneSpec(**d.get("backbone", {})), head=MilHeadSpec(**d.get("head", {})))

    def encoder_dims(self) -> list[int]:
        """Model dim of each encoder level (one level unless pyramid)."""
        dims = self.backbone.stage_dims
        if self.head.variant != "pyramid_transformer":
            return [dims[-1]]
        out = [dims[0]]
        for d in dims[1:]:
            out.append(out[-1] + d)
        return out

    @property
    def embed_dim(self) -> int:
        if self.head.variant == "pyramid_transformer":
            return sum(self.backbone.stage_dims)
        return self.backbone.stage_dims[-1]


@dataclass
class BagOutput:
    """Batched model output; leading axis indexes bags."""

    bag_logits: Tensor  # (B, C)
    attention: Tensor  # (B, K)
    instance_logits: Tensor  # (B, K, C)
    encoded_instances: Tensor  # (B, K, M)
    selected: np.ndarray | None = None  # Max-MIL: chosen instance per bag


def attention_pool(h: Tensor, v: Linear, w: Linear, u: Linear | None = None) -> tuple[Tensor, Tensor]:
    """Attention-weighted mean of instance embeddings.

    a = softmax_K(tanh(H V) w), z = sum_k a_k h_k. When ``u`` is given the
    hidden layer is gated: tanh(H V) * sigmoid(H U).
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = ag.reshape(h, (1,) + h.shape)
    b, k, m = h.shape
    hidden = ag.tanh(v(h))
    if u is not None:
        hidden = ag.mul(hidden, ag.sigmoid(u(h)))
    scores = ag.reshape(w(hidden), (b, k))
    a = ag.softmax(scores, axis=-1)
    z = ag.reshape(ag.matmul(ag.reshape(a, (b, 1, k)), h), (b, m))
    if squeeze:
        return ag.reshape(z, (m,)), ag.reshape(a, (k,))
    return z, a


class MilModel(Module):
    """Backbone followed by one of the five MIL heads."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | int = 0, dtype=np.float32):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        hs = spec.head
        if hs.variant == "pyramid_transformer" and hs.depth < 1:
            raise ConfigError("pyramid_transformer needs encoder depth >= 1")
        self.backbone = build_backbone(spec.backbone, rng, dtype)
        m = spec.embed_dim
        if hs.variant in ("transformer", "pyramid_transformer"):
            self.encoders = [
                TransformerEncoder(d, hs.depth, hs.num_heads, hs.ffn_dim, rng, hs.norm, hs.dropout, dtype)
                for d in spec.encoder_dims()
            ]
        else:
            self.encoders = []
        if hs.variant != "max":
            self.attn_v = Linear(m, hs.attn_dim, rng, bias=False, dtype=dtype)
            self.attn_w = Linear(hs.attn_dim, 1, rng, bias=False, dtype=dtype)
            self.attn_u = (
                Linear(m, hs.attn_dim, rng, bias=False, dtype=dtype)
                if hs.variant == "gated_attention" else None
            )
        self.classifier = Linear(m, hs.num_classes, rng, zero_bias=True, dtype=dtype)
        self.instance_classifier = (
            Linear(m, hs.num_classes, rng, zero_bias=True, dtype=dtype)
            if hs.instance_head == "separate" else None
        )

    @property
    def variant(self) -> str:
        return self.spec.head.variant

    def transformer_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("encoders.")]

    def self_attention_maps(self) -> list[list[np.ndarray]]:
        """Per encoder level, per block: (B, heads, K, K) attention of the last forward."""
        return [enc.attention_maps() for enc in self.encoders]

    def _encode(self, x: Tensor) -> Tensor:
        scales = self.backbone(x)
        if self.variant != "pyramid_transformer":
            h = scales[-1]
            for enc in self.encoders:
                h = enc(h)
            return h
        h = self.encoders[0](scales[0])
        for enc, feats in zip(self.encoders[1:], scales[1:]):
            h = enc(ag.concat([h, feats], axis=-1))
        return h

    def _instance_logits(self, h: Tensor) -> Tensor:
        head = self.instance_classifier or self.classifier
        return head(h)

    def forward(self, x) -> BagOutput:
        """Run a batch of bags, (B, K, ...) or one bag (K, ...)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        single = x.ndim == (2 if self.spec.backbone.kind == "mlp" else 4)
        if single:
            x = ag.reshape(x, (1,) + x.shape)
        h = self._encode(x)
        b, k, _ = h.shape
        if self.variant == "max":
            return self._max_forward(h)
        z, a = attention_pool(h, self.attn_v, self.attn_w, self.attn_u)
        return BagOutput(
            bag_logits=self.classifier(z),
            attention=a,
            instance_logits=self._instance_logits(h),
            encoded_instances=h,
        )

    def _max_forward(self, h: Tensor) -> BagOutput:
        b, k, _ = h.shape
        inst = self.classifier(h)
        d = inst.data
        e = np.exp(d - d.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        score = p[..., 1:].max(axis=-1)
        sel = np.argmax(score, axis=1)
        bag = inst[np.arange(b), sel]
        onehot = np.zeros((b, k), dtype=self.dtype)
        onehot[np.arange(b), sel] = 1.0
        inst_logits = inst if self.instance_classifier is None else self.instance_classifier(h)
        return BagOutput(bag, Tensor(onehot), inst_logits, h, selected=sel)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> MilModel:
    return MilModel(spec, np.random.default_rng(seed), dtype)


def bag_predict(output: BagOutput) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class (ties go to the lower id) and softmax bag probabilities."""
    d = output.bag_logits.data.astype(np.float64)
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    return np.argmax(probs, axis=-1), probs
