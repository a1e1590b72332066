"""Central finite-difference checks for every op and composite layer.

Each case builds fresh float64 inputs, projects the output onto a fixed
random tensor to get a scalar, and compares the analytic gradient of every
input with ``(f(x + eps) - f(x - eps)) / (2 eps)``. The error of one check is
``max |analytic - numeric| / max(1, max |numeric|)`` over all coordinates of
all inputs, so a case fails only on a genuine derivative bug.

Ops are checked coordinate by coordinate. Composite layers have too many
parameters for that inside the time budget, so each of their tensors is
checked along one random direction per trial: the analytic ``<grad, v>``
against ``(f(x + eps v) - f(x - eps v)) / (2 eps)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .heads import MilHeadSpec, ModelSpec, MilModel, attention_pool
from .nn import (
    BackboneSpec,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    TransformerEncoder,
    TransformerEncoderBlock,
)

EPS = 1e-5
OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    kind: str  # "op" | "composite"
    trials: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.kind:9s} {self.name:28s} trials={self.trials} "
                f"max_err={self.max_error:.2e} tol={self.tolerance:.0e} {self.seconds:.2f}s")


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (modified in place, restored)."""
    flat = arr.reshape(-1)
    out = np.empty(flat.shape)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(arr.shape)


def directional_error(f: Callable[[], float], arr: np.ndarray, analytic: np.ndarray,
                      rng: np.random.Generator, eps: float = EPS) -> float:
    v = rng.standard_normal(arr.shape)
    old = arr.copy()
    arr += eps * v
    hi = f()
    arr[...] = old - eps * v
    lo = f()
    arr[...] = old
    num = (hi - lo) / (2 * eps)
    return abs(float(np.sum(analytic * v)) - num) / max(1.0, abs(num))


def check(build: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator,
          eps: float = EPS, directional: bool = False) -> float:
    """Largest scaled error between analytic and numeric gradients for one trial."""
    arrays = [np.array(a, dtype=F64) for a in arrays]
    probe = None

    def value() -> float:
        with ag.no_grad():
            out = build([Tensor(a) for a in arrays])
        return float(np.sum(out.data * probe))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    probe = rng.standard_normal(out.shape)
    ag.backward(ag.sum_(ag.mul(out, Tensor(probe))))
    err = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        if directional:
            err = max(err, directional_error(value, arr, analytic, rng, eps))
            continue
        num = numeric_grad(value, arr, eps)
        scale = max(1.0, float(np.max(np.abs(num))))
        err = max(err, float(np.max(np.abs(analytic - num))) / scale)
    return err


# -- parameter substitution ---------------------------------------------------

def _swap(module: Module, tensors: Sequence[Tensor]) -> None:
    """Point ``module``'s parameters at ``tensors`` (same order as named_parameters)."""
    for (name, _), t in zip(list(module.named_parameters()), tensors):
        owner = module
        parts = name.split(".")
        for part in parts[:-1]:
            owner = owner[int(part)] if isinstance(owner, list) else getattr(owner, part)
        setattr(owner, parts[-1], t)


def _module_case(make: Callable[[np.random.Generator], Module], input_shapes: Sequence[tuple],
                 call: Callable[[Module, list[Tensor]], Tensor]):
    def case(rng: np.random.Generator, exhaustive: bool):
        module = make(rng)
        originals = [p for _, p in module.named_parameters()]
        inputs = [rng.uniform(-2, 2, s) for s in input_shapes]
        n_in = len(inputs)

        def build(ts: list[Tensor]) -> Tensor:
            _swap(module, ts[n_in:])
            try:
                return call(module, ts[:n_in])
            finally:
                _swap(module, originals)

        arrays = inputs + [p.data.copy() for p in originals]
        return check(build, arrays, rng, directional=not exhaustive)

    return case


def _op_case(build: Callable[[list[Tensor]], Tensor], make_inputs: Callable[[np.random.Generator], list]):
    def case(rng: np.random.Generator, exhaustive: bool):
        return check(build, make_inputs(rng), rng)

    return case


def _u(*shape, lo=-2.0, hi=2.0):
    return lambda rng: rng.uniform(lo, hi, shape)


def _away_from_zero(shape, gap=1e-2):
    def make(rng):
        x = rng.uniform(-2, 2, shape)
        return np.where(np.abs(x) < gap, np.copysign(gap, x) + x, x)

    return make


def _inputs(*makers):
    return lambda rng: [m(rng) for m in makers]


def _dropout(ts):
    # a fresh generator per call keeps the mask fixed across perturbations
    return ag.dropout(ts[0], 0.3, np.random.default_rng(7))


def _ce(reduction, ignore):
    targets = np.array([0, 2, 1, 2, 0])

    def build(ts):
        t = targets.copy()
        if ignore:
            t[1] = -1
        return ag.cross_entropy(ts[0], t, reduction=reduction, ignore_label=-1 if ignore else None)

    return build


OP_CASES: dict[str, Callable] = {
    "add": _op_case(lambda t: ag.add(t[0], t[1]), _inputs(_u(3, 4), _u(3, 4))),
    "sub": _op_case(lambda t: ag.sub(t[0], t[1]), _inputs(_u(3, 4), _u(3, 4))),
    "mul": _op_case(lambda t: ag.mul(t[0], t[1]), _inputs(_u(3, 4), _u(3, 4))),
    "scale": _op_case(lambda t: ag.scale(t[0], -1.7), _inputs(_u(3, 4))),
    "bias_add": _op_case(lambda t: ag.bias_add(t[0], t[1]), _inputs(_u(2, 3, 4), _u(4))),
    "row_scale": _op_case(lambda t: ag.row_scale(t[0], t[1]), _inputs(_u(5, 3), _u(5))),
    "tanh": _op_case(lambda t: ag.tanh(t[0]), _inputs(_u(3, 4))),
    "sigmoid": _op_case(lambda t: ag.sigmoid(t[0]), _inputs(_u(3, 4))),
    "relu": _op_case(lambda t: ag.relu(t[0]), _inputs(_away_from_zero((3, 4)))),
    "exp": _op_case(lambda t: ag.exp(t[0]), _inputs(_u(3, 4))),
    "log": _op_case(lambda t: ag.log(t[0]), _inputs(_u(3, 4, lo=0.1, hi=2.0))),
    "dropout": _op_case(_dropout, _inputs(_u(4, 5))),
    "reshape": _op_case(lambda t: ag.reshape(t[0], (4, 3)), _inputs(_u(2, 6))),
    "permute": _op_case(lambda t: ag.permute(t[0], (2, 0, 1)), _inputs(_u(2, 3, 4))),
    "transpose": _op_case(lambda t: ag.transpose(t[0]), _inputs(_u(2, 3, 4))),
    "getitem": _op_case(lambda t: t[0][np.array([0, 2, 2]), 1:], _inputs(_u(3, 4))),
    "concat": _op_case(lambda t: ag.concat([t[0], t[1]], axis=-1), _inputs(_u(2, 3, 2), _u(2, 3, 4))),
    "split": _op_case(lambda t: ag.mul(*ag.split(t[0], [2, 2], axis=1)), _inputs(_u(3, 4))),
    "sum": _op_case(lambda t: ag.sum_(t[0], axis=1), _inputs(_u(2, 3, 4))),
    "mean_pool": _op_case(lambda t: ag.mean_pool(t[0], axis=(2, 3)), _inputs(_u(2, 3, 4, 4))),
    "matmul": _op_case(lambda t: ag.matmul(t[0], t[1]), _inputs(_u(3, 4), _u(4, 2))),
    "matmul_batched": _op_case(lambda t: ag.matmul(t[0], t[1]), _inputs(_u(2, 3, 4), _u(2, 4, 2))),
    "matmul_shared": _op_case(lambda t: ag.matmul(t[0], t[1]), _inputs(_u(2, 3, 4), _u(4, 2))),
    "linear": _op_case(lambda t: ag.linear(t[0], t[1], t[2]), _inputs(_u(2, 3, 4), _u(5, 4), _u(5))),
    "softmax": _op_case(lambda t: ag.softmax(t[0], axis=-1), _inputs(_u(3, 5))),
    "log_softmax": _op_case(lambda t: ag.log_softmax(t[0], axis=-1), _inputs(_u(3, 5))),
    "layer_norm": _op_case(lambda t: ag.layer_norm(t[0], t[1], t[2]), _inputs(_u(3, 6), _u(6), _u(6))),
    "cross_entropy_mean": _op_case(_ce("mean", False), _inputs(_u(5, 3))),
    "cross_entropy_sum_ignore": _op_case(_ce("sum", True), _inputs(_u(5, 3))),
    "conv2d": _op_case(lambda t: ag.conv2d(t[0], t[1], t[2], stride=2, padding=1),
                       _inputs(_u(2, 2, 5, 5), _u(3, 2, 3, 3), _u(3))),
}


def _mil(variant: str, kind: str = "mlp"):
    if kind == "mlp":
        backbone = BackboneSpec("mlp", in_dim=5, stage_dims=(4, 4) if variant == "pyramid_transformer" else (4,))
    else:
        backbone = BackboneSpec("conv", in_channels=2, stage_dims=(3,))
    spec = ModelSpec(backbone, MilHeadSpec(variant, attn_dim=3, depth=1, num_heads=2, num_classes=3))
    return lambda rng: MilModel(spec, rng, F64)


def _mil_call(m: MilModel, ts: list[Tensor]) -> Tensor:
    out = m(ts[0])
    b = out.bag_logits.shape[0]
    return ag.concat([out.bag_logits, ag.reshape(out.instance_logits, (b, -1))], axis=-1)


def _pool_case(gated: bool):
    def make(rng):
        m = Module()
        m.v = Linear(4, 3, rng, bias=False, dtype=F64)
        m.w = Linear(3, 1, rng, bias=False, dtype=F64)
        m.u = Linear(4, 3, rng, bias=False, dtype=F64) if gated else None
        return m

    def call(m, ts):
        z, a = attention_pool(ts[0], m.v, m.w, m.u)
        return ag.concat([z, a], axis=-1)

    return _module_case(make, [(2, 5, 4)], call)


COMPOSITE_CASES: dict[str, Callable] = {
    "Linear": _module_case(lambda r: Linear(4, 3, r, dtype=F64), [(2, 5, 4)], lambda m, t: m(t[0])),
    "LayerNorm": _module_case(lambda r: LayerNorm(6, dtype=F64), [(3, 6)], lambda m, t: m(t[0])),
    "FeedForward": _module_case(lambda r: FeedForward(4, 6, r, dtype=F64), [(2, 3, 4)], lambda m, t: m(t[0])),
    "MultiHeadSelfAttention": _module_case(lambda r: MultiHeadSelfAttention(4, 2, r, dtype=F64), [(2, 3, 4)],
                                           lambda m, t: m(t[0])),
    "EncoderBlock_pre": _module_case(lambda r: TransformerEncoderBlock(4, 2, 4, r, "pre", dtype=F64),
                                     [(2, 3, 4)], lambda m, t: m(t[0])),
    "EncoderBlock_post": _module_case(lambda r: TransformerEncoderBlock(4, 2, 4, r, "post", dtype=F64),
                                      [(2, 3, 4)], lambda m, t: m(t[0])),
    "TransformerEncoder": _module_case(lambda r: TransformerEncoder(4, 2, 2, None, r, dtype=F64),
                                       [(1, 3, 4)], lambda m, t: m(t[0])),
    "attention_pool": _pool_case(False),
    "gated_attention_pool": _pool_case(True),
    "MIL_attention": _module_case(_mil("attention"), [(2, 4, 5)], _mil_call),
    "MIL_gated_attention": _module_case(_mil("gated_attention"), [(2, 4, 5)], _mil_call),
    "MIL_transformer": _module_case(_mil("transformer"), [(2, 4, 5)], _mil_call),
    "MIL_pyramid_transformer": _module_case(_mil("pyramid_transformer"), [(2, 4, 5)], _mil_call),
    "MIL_max": _module_case(_mil("max"), [(2, 4, 5)], _mil_call),
    "MIL_attention_conv": _module_case(_mil("attention", "conv"), [(1, 2, 2, 6, 6)], _mil_call),
}


def run_case(name: str, case: Callable, kind: str, trials: int, seed: int,
             exhaustive: bool = False) -> CheckResult:
    tol = OP_TOL if kind == "op" else COMPOSITE_TOL
    rng = np.random.default_rng([seed, sum(name.encode())])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        worst = max(worst, case(rng, exhaustive))
    return CheckResult(name, kind, trials, worst, tol, time.perf_counter() - t0)


def run_suite(trials: int = 100, seed: int = 0, names: Sequence[str] | None = None,
              exhaustive: bool = False, report: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run every op and composite case; ``names`` restricts to a subset."""
    results = []
    for kind, cases in (("op", OP_CASES), ("composite", COMPOSITE_CASES)):
        for name, case in cases.items():
            if names is not None and name not in names:
                continue
            res = run_case(name, case, kind, trials, seed, exhaustive)
            if report:
                report(res.line())
            results.append(res)
    return results
