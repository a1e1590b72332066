"""Training loop, k-fold cross-validation and ensemble prediction."""

from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .bagsynth import Bag, BagRecipe, generate, kfold_split, read_manifest, sample_tiles
from .checkpoint import save_checkpoint
from .heads import MilModel, ModelSpec
from .metrics import MetricsReport, aggregate_folds, evaluate
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

UNKNOWN = -1
OUTPUT_ENV = "DEPMIL_OUTPUT_DIR"


@dataclass
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: BagRecipe | None = None
    manifest: str | None = None
    epochs: int = 50
    batch_size: int = 16
    lr: float = 3e-4
    transformer_lr: float = 3e-5
    weight_decay: float = 0.1
    lam: float = 100.0
    patch_reduction: str = "sum"
    folds: int = 5
    fold_indices: list[int] | None = None
    ensemble: int = 5
    seed: int = 0
    max_instances: int = 56
    warm_start: bool = True  # pseudo-label retraining continues from the bag-only members
    select_best: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        if isinstance(self.data, dict):
            self.data = BagRecipe.from_dict(self.data)
        if self.lr <= 0 or self.transformer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch_reduction not in ("sum", "mean"):
            raise ValueError("patch_reduction must be 'sum' or 'mean'")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.ensemble < 1:
            raise ValueError("ensemble must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["data"] = None if self.data is None else self.data.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def recipe(self) -> BagRecipe:
        if self.data is not None:
            return self.data
        if self.manifest is not None:
            return read_manifest(self.manifest)
        raise ValueError("config names neither a data recipe nor a manifest")

    def folds_to_run(self) -> list[int]:
        return list(range(self.folds)) if self.fold_indices is None else list(self.fold_indices)


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def output_dir(default) -> Path | None:
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return None if default is None else Path(default)


def check_compatible(spec: ModelSpec, recipe: BagRecipe) -> None:
    bb = spec.backbone
    if recipe.kind == "feature" and (bb.kind != "mlp" or bb.in_dim != recipe.patterns.feature_dim):
        raise ValueError(
            f"feature bags of dim {recipe.patterns.feature_dim} need an mlp backbone with that in_dim"
        )
    if recipe.kind == "image" and bb.kind != "conv":
        raise ValueError("image bags need a conv backbone")
    if spec.head.num_classes != recipe.num_classes:
        raise ValueError(
            f"model predicts {spec.head.num_classes} classes, dataset has {recipe.num_classes}"
        )


# -- batched forward helpers ------------------------------------------------------

def group_by_k(instances: Sequence[np.ndarray], chunk: int | None = None) -> list[np.ndarray]:
    """Indices of equally sized bags, in first-seen order, split into chunks."""
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, x in enumerate(instances):
        groups[x.shape].append(i)
    out = []
    for idx in groups.values():
        step = chunk or len(idx)
        for s in range(0, len(idx), step):
            out.append(np.asarray(idx[s:s + step]))
    return out


def _softmax(d: np.ndarray) -> np.ndarray:
    d = d.astype(np.float64)
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class BagInference:
    bag_probs: np.ndarray  # (n, C)
    attention: list[np.ndarray]  # per bag (K,)
    instance_probs: list[np.ndarray]  # per bag (K, C)


def infer(model: MilModel, bags: Sequence[Bag], chunk: int = 128) -> BagInference:
    """Evaluate every bag on all of its stored instances, without a graph."""
    n = len(bags)
    c = model.spec.head.num_classes
    probs = np.zeros((n, c))
    attn: list = [None] * n
    inst: list = [None] * n
    xs = [b.instances for b in bags]
    with ag.no_grad():
        for idx in group_by_k(xs, chunk):
            out = model(np.stack([xs[i] for i in idx]))
            p = _softmax(out.bag_logits.data)
            ip = _softmax(out.instance_logits.data)
            a = out.attention.data.astype(np.float64)
            for j, i in enumerate(idx):
                probs[i] = p[j]
                attn[i] = a[j]
                inst[i] = ip[j]
    return BagInference(probs, attn, inst)


def evaluate_model(model: MilModel, bags: Sequence[Bag]) -> MetricsReport:
    res = infer(model, bags)
    return evaluate([b.label for b in bags], res.bag_probs, model.spec.head.num_classes)


def batch_loss(model: MilModel, xs: Sequence[np.ndarray], labels: Sequence[int],
               pseudo: Sequence[np.ndarray | None] | None, lam: float, reduction: str,
               denom: int) -> ag.Tensor:
    """Sum over bags of bag CE (+ lam * patch CE), divided by ``denom``."""
    total = None
    for idx in group_by_k(xs):
        out = model(np.stack([xs[i] for i in idx]))
        y = np.asarray([labels[i] for i in idx])
        loss = ag.cross_entropy(out.bag_logits, y, reduction="sum")
        if pseudo is not None and lam:
            loss = ag.add(loss, _patch_term(out.instance_logits, [pseudo[i] for i in idx], lam, reduction))
        total = loss if total is None else ag.add(total, loss)
    return ag.scale(total, 1.0 / denom)


def _patch_term(inst_logits: ag.Tensor, labels: Sequence[np.ndarray | None], lam: float,
                reduction: str) -> ag.Tensor:
    g, k, c = inst_logits.shape
    targets = np.full((g, k), UNKNOWN, dtype=np.int64)
    for j, lab in enumerate(labels):
        if lab is not None:
            targets[j] = lab
    if reduction == "sum":
        flat = ag.reshape(inst_logits, (g * k, c))
        return ag.scale(ag.cross_entropy(flat, targets.ravel(), "sum", UNKNOWN), lam)
    total = None
    for j in range(g):
        term = ag.cross_entropy(inst_logits[j], targets[j], "mean", UNKNOWN)
        total = term if total is None else ag.add(total, term)
    return ag.scale(total, lam)


# -- training -------------------------------------------------------------------

@dataclass
class FitResult:
    model: MilModel
    report: MetricsReport
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def fit(model: MilModel, config: TrainConfig, train_bags: Sequence[Bag], val_bags: Sequence[Bag],
        seed: int, pseudo_labels: dict[int, np.ndarray] | None = None,
        recipe: BagRecipe | None = None, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``model`` in place; keep the weights with the best validation QWK."""
    rng = np.random.default_rng(seed)
    decay = model.transformer_parameter_names()
    opt = Adam(model.named_parameters(), config.lr, decay, config.transformer_lr, config.weight_decay)
    n = len(train_bags)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    image_mode = recipe is not None and recipe.kind == "image"
    best_qwk = -np.inf
    best_state = model.state_dict()
    best_report = None
    best_epoch = -1
    history = []
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, config.batch_size):
            chosen = [train_bags[i] for i in order[s:s + config.batch_size]]
            xs, pls = _training_views(chosen, pseudo_labels, recipe, rng) if image_mode else (
                [b.instances for b in chosen],
                None if pseudo_labels is None else [pseudo_labels.get(b.id) for b in chosen],
            )
            loss = batch_loss(model, xs, [b.label for b in chosen], pls, config.lam,
                              config.patch_reduction, len(chosen))
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, total_steps, 1.0))
            step += 1
            running += value * len(chosen)
        model.eval()
        report = evaluate_model(model, val_bags) if val_bags else None
        entry = {"epoch": epoch, "train_loss": running / n,
                 "val_qwk": None if report is None else report.qwk}
        history.append(entry)
        log.debug("epoch %d loss %.4f val_qwk %s", epoch, entry["train_loss"], entry["val_qwk"])
        if on_epoch:
            on_epoch(entry)
        if report is not None and (report.qwk > best_qwk or not config.select_best):
            best_qwk = report.qwk
            best_state = model.state_dict()
            best_report = report
            best_epoch = epoch
    if best_report is not None:
        model.load_state_dict(best_state)
    return FitResult(model, best_report, best_epoch, history, step)


def _training_views(bags, pseudo_labels, recipe, rng):
    xs, pls = [], []
    for b in bags:
        if pseudo_labels is not None and b.id in pseudo_labels:
            # pseudo-labels refer to the stored zero-offset tiles; subsample those
            lab = pseudo_labels[b.id]
            idx = np.arange(b.k)
            if b.k > recipe.max_instances:
                idx = np.sort(rng.choice(b.k, size=recipe.max_instances, replace=False))
            xs.append(b.instances[idx])
            pls.append(lab[idx])
        else:
            tiles, _ = sample_tiles(b, recipe, rng)
            xs.append(tiles)
            pls.append(None)
    return xs, (pls if pseudo_labels is not None else None)


def mean_loss(model: MilModel, bags: Sequence[Bag]) -> float:
    with ag.no_grad():
        loss = batch_loss(model, [b.instances for b in bags], [b.label for b in bags], None, 0.0,
                          "sum", len(bags))
    return loss.item()


@dataclass
class TrainResult:
    models: dict[int, MilModel]
    fold_reports: dict[int, MetricsReport]
    report: MetricsReport
    splits: list[tuple[np.ndarray, np.ndarray]]
    fits: dict[int, FitResult] = field(default_factory=dict)


def load_dataset(config: TrainConfig) -> tuple[BagRecipe, list[Bag]]:
    recipe = config.recipe()
    return recipe, generate(recipe)


def split_bags(bags: Sequence[Bag], train_ids, val_ids) -> tuple[list[Bag], list[Bag]]:
    by_id = {b.id: b for b in bags}
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]


def train(config: TrainConfig, bags: Sequence[Bag] | None = None,
          pseudo_labels: dict[int, np.ndarray] | None = None, out_dir=None,
          member: int = 0, init: dict[int, MilModel] | None = None) -> TrainResult:
    """k-fold cross-validation: one model per requested fold.

    ``init`` maps a fold to a model whose weights seed that fold's training.
    """
    recipe = config.recipe() if (bags is None or config.data or config.manifest) else None
    if bags is None:
        bags = generate(recipe)
    if recipe is not None:
        check_compatible(config.model, recipe)
    splits = kfold_split([b.label for b in bags], config.folds, config.seed)
    ids = np.array([b.id for b in bags])
    out = output_dir(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    models, reports, fits = {}, {}, {}
    for fold in config.folds_to_run():
        tr, va = splits[fold]
        train_bags, val_bags = split_bags(bags, ids[tr], ids[va])
        model = MilModel(config.model, np.random.default_rng(derive_seed(config.seed, 1, fold, member)))
        if init is not None and fold in init:
            model.load_state_dict(init[fold].state_dict())
        res = fit(model, config, train_bags, val_bags, derive_seed(config.seed, 2, fold, member),
                  pseudo_labels, recipe)
        log.info("fold %d: qwk %.4f (epoch %d)", fold, res.report.qwk, res.best_epoch)
        models[fold], reports[fold], fits[fold] = model, res.report, res
        if out is not None:
            save_checkpoint(out / f"fold{fold}_m{member}.ckpt", model, res.steps, config.seed,
                            {"fold": fold, "member": member, "val_qwk": res.report.qwk})
    report = aggregate_folds([reports[f] for f in sorted(reports)])
    if out is not None:
        (out / "report.json").write_text(report.to_json())
    return TrainResult(models, reports, report, splits, fits)


def ensemble_predict(models: Sequence[MilModel], bags: Sequence[Bag]) -> tuple[np.ndarray, np.ndarray]:
    """Mean of per-model bag probabilities and its argmax."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    ref = models[0].spec.head.num_classes
    for m in models[1:]:
        if m.spec.head.num_classes != ref or m.spec.backbone != models[0].spec.backbone:
            raise ValueError("ensemble members have incompatible heads")
    probs = np.mean([infer(m, bags).bag_probs for m in models], axis=0)
    return probs, np.argmax(probs, axis=1)
