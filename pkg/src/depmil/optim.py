"""Adam with decoupled weight decay on a named subset, and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float | dict[str, float], weight_decay: float = 0.0,
              weight_decay_set: frozenset[str] | set[str] = frozenset()) -> None:
    """One bias-corrected Adam update, in place.

    ``lr`` is a scalar or a per-parameter mapping. Weight decay is decoupled
    (``p -= lr * wd * p``) and touches only names in ``weight_decay_set``.
    Parameters with a ``None`` gradient are treated as having zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        step_lr = lr[name] if isinstance(lr, dict) else lr
        update = (m / c1) / (np.sqrt(v / c2) + EPS)
        if weight_decay and name in weight_decay_set:
            update = update + weight_decay * p
        p -= (step_lr * update).astype(p.dtype)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Two learning-rate groups over a model's named parameters.

    Parameters whose name is in ``decay_names`` get ``decay_lr`` and weight
    decay; every other parameter gets ``base_lr`` and no decay.
    """

    def __init__(self, named_params, base_lr: float, decay_names=(), decay_lr: float | None = None,
                 weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.decay_names = frozenset(decay_names)
        unknown = self.decay_names - set(self.params)
        if unknown:
            raise KeyError(f"decay set names unknown parameters: {sorted(unknown)}")
        self.base_lr = base_lr
        self.decay_lr = base_lr if decay_lr is None else decay_lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def base_rates(self) -> dict[str, float]:
        return {n: self.decay_lr if n in self.decay_names else self.base_lr for n in self.params}

    def step(self, factor: float = 1.0) -> None:
        """Apply one update with every group's rate multiplied by ``factor``."""
        rates = {n: r * factor for n, r in self.base_rates().items()}
        adam_step(
            {n: p.data for n, p in self.params.items()},
            {n: p.grad for n, p in self.params.items()},
            self.state,
            rates,
            self.weight_decay,
            self.decay_names,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
