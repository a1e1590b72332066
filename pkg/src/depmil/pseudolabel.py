"""Ensemble pseudo-labels for instances and the combined bag + patch loss.

For a positive bag (label != 0) the instances with the highest ensembled
attention receive the ensemble's hard class, the ones with the lowest
attention receive class 0 and the rest stay unknown. Every instance of a
negative bag is labelled 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bagsynth import Bag, BagRecipe, instance_truth, kfold_split
from .heads import MilModel
from .metrics import MetricsReport, aggregate_folds
from .train import UNKNOWN, TrainConfig, derive_seed, evaluate_model, fit, infer, split_bags

log = logging.getLogger(__name__)

TOP = "ensemble_top"
LOW = "forced_zero_low_attention"
NEG = "forced_zero_negative_bag"
UNK = "unknown"

TOP_FRACTION = 0.10


@dataclass
class EnsembleInference:
    bag_ids: list[int]
    attention: list[np.ndarray]  # per bag (K,), sums to 1
    instance_probs: list[np.ndarray]  # per bag (K, C)
    n_models: int


@dataclass
class PseudoLabelRecord:
    bag_id: int
    instance_idx: int
    label: int | None  # None = unknown
    source: str
    attention: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["label"] = "unknown" if self.label is None else self.label
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "PseudoLabelRecord":
        d = json.loads(line)
        d["label"] = None if d["label"] == "unknown" else int(d["label"])
        return cls(**d)


def ensemble_infer(models: Sequence[MilModel], bags: Sequence[Bag]) -> EnsembleInference:
    """Average attention (each model renormalised per bag first, then the mean
    renormalised) and per-instance class probabilities over the ensemble."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    ref = models[0].spec.to_dict()
    for m in models[1:]:
        if m.spec.to_dict() != ref:
            raise ValueError("ensemble members must share one model spec")
    att_sum = [np.zeros(b.k) for b in bags]
    prob_sum = [np.zeros((b.k, models[0].spec.head.num_classes)) for b in bags]
    for m in models:
        res = infer(m, bags)
        for i in range(len(bags)):
            a = res.attention[i]
            att_sum[i] += a / a.sum()
            prob_sum[i] += res.instance_probs[i]
    n = len(models)
    attention = [a / a.sum() for a in att_sum]
    probs = [p / n for p in prob_sum]
    return EnsembleInference([b.id for b in bags], attention, probs, n)


def top_count(k: int) -> int:
    return max(1, int(np.floor(TOP_FRACTION * k + 1e-9)))


def assign_bag(bag_id: int, attention: np.ndarray, probs: np.ndarray, bag_label: int,
               zero_top_unknown: bool = False) -> list[PseudoLabelRecord]:
    k = len(attention)
    if k < 1:
        raise ValueError(f"bag {bag_id} has no instances")
    if bag_label == 0:
        return [PseudoLabelRecord(bag_id, i, 0, NEG, float(attention[i])) for i in range(k)]
    m = top_count(k)
    # stable sort on -attention: ties go to the lower instance index
    order = np.argsort(-np.asarray(attention), kind="stable")
    top, low = order[:m], order[::-1][:m]
    label = np.full(k, UNKNOWN)
    source = [UNK] * k
    hard = np.argmax(probs, axis=1)
    for i in low:
        label[i], source[i] = 0, LOW
    for i in top:
        if source[i] == LOW:  # K < 2m: the instance sits at both ends
            label[i], source[i] = UNKNOWN, UNK
            continue
        if zero_top_unknown and hard[i] == 0:
            continue
        label[i], source[i] = int(hard[i]), TOP
    return [
        PseudoLabelRecord(bag_id, i, None if label[i] == UNKNOWN else int(label[i]), source[i],
                          float(attention[i]))
        for i in range(k)
    ]


def assign_pseudo_labels(inference: EnsembleInference, bag_labels: dict[int, int] | Sequence[int],
                         zero_top_unknown: bool = False) -> list[PseudoLabelRecord]:
    """Hard pseudo-labels for every instance of every bag.

    ``bag_labels`` maps bag id to label (or is aligned with ``inference.bag_ids``).
    """
    if not isinstance(bag_labels, dict):
        bag_labels = dict(zip(inference.bag_ids, bag_labels))
    records = []
    for bid, a, p in zip(inference.bag_ids, inference.attention, inference.instance_probs):
        records.extend(assign_bag(bid, a, p, int(bag_labels[bid]), zero_top_unknown))
    return records


def records_to_labels(records: Sequence[PseudoLabelRecord]) -> dict[int, np.ndarray]:
    """Per-bag label arrays with ``UNKNOWN`` (-1) for unknown instances."""
    size: dict[int, int] = {}
    for r in records:
        size[r.bag_id] = max(size.get(r.bag_id, 0), r.instance_idx + 1)
    out = {b: np.full(n, UNKNOWN, dtype=np.int64) for b, n in size.items()}
    for r in records:
        if r.label is not None:
            out[r.bag_id][r.instance_idx] = r.label
    return out


def write_records(path, records: Sequence[PseudoLabelRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[PseudoLabelRecord]:
    with open(path) as fh:
        return [PseudoLabelRecord.from_json(line) for line in fh if line.strip()]


def combined_loss(bag_logits: Tensor, bag_label: int, instance_logits: Tensor,
                  records: Sequence[PseudoLabelRecord] | np.ndarray, lam: float = 100.0,
                  reduction: str = "sum") -> Tensor:
    """CE(bag) + lam * patch CE over labelled instances of one bag.

    ``bag_logits`` is (C,) or (1, C); ``instance_logits`` is (K, C).
    """
    if bag_logits.ndim == 1:
        bag_logits = ag.reshape(bag_logits, (1,) + bag_logits.shape)
    if isinstance(records, np.ndarray):
        targets = records.astype(np.int64)
    else:
        targets = np.array([UNKNOWN if r.label is None else r.label for r in records], dtype=np.int64)
    if len(targets) != instance_logits.shape[0]:
        raise ValueError(f"{len(targets)} pseudo-labels for {instance_logits.shape[0]} instances")
    bag = ag.cross_entropy(bag_logits, [bag_label], reduction="sum")
    patch = ag.cross_entropy(instance_logits, targets, reduction=reduction, ignore_label=UNKNOWN)
    return ag.add(bag, ag.scale(patch, lam))


# -- the full round ---------------------------------------------------------------

def label_change_rate(a: dict[int, np.ndarray], b: dict[int, np.ndarray]) -> float:
    """Fraction of instances whose pseudo-label (unknown included) differs."""
    changed = total = 0
    for bid, la in a.items():
        lb = b[bid]
        changed += int(np.sum(la != lb))
        total += len(la)
    return changed / total if total else 0.0


def label_value_change_rate(a: dict[int, np.ndarray], b: dict[int, np.ndarray]) -> float:
    """Fraction of instances labelled in both maps whose class differs."""
    changed = total = 0
    for bid, la in a.items():
        lb = b[bid]
        both = (la != UNKNOWN) & (lb != UNKNOWN)
        changed += int(np.sum(la[both] != lb[both]))
        total += int(both.sum())
    return changed / total if total else 0.0


def instance_agreement(inference: EnsembleInference, bags: Sequence[Bag], rule: str) -> float:
    """Share of instances whose ensembled hard class matches the hidden truth."""
    by_id = {b.id: b for b in bags}
    hit = total = 0
    for bid, p in zip(inference.bag_ids, inference.instance_probs):
        truth = instance_truth(rule, by_id[bid].patterns)
        valid = by_id[bid].patterns >= 0
        hit += int(np.sum((np.argmax(p, axis=1) == truth) & valid))
        total += int(valid.sum())
    return hit / total if total else float("nan")


def pseudo_label_agreement(labels: dict[int, np.ndarray], bags: Sequence[Bag], rule: str) -> float:
    by_id = {b.id: b for b in bags}
    hit = total = 0
    for bid, lab in labels.items():
        truth = instance_truth(rule, by_id[bid].patterns)
        known = (lab != UNKNOWN) & (by_id[bid].patterns >= 0)
        hit += int(np.sum(lab[known] == truth[known]))
        total += int(known.sum())
    return hit / total if total else float("nan")


@dataclass
class RoundReport:
    before: MetricsReport
    after: MetricsReport
    before_members: list[float]
    after_members: list[float]
    instance_agreement_before: float
    instance_agreement_after: float
    pseudo_label_agreement: list[float]
    label_change: list[dict] = field(default_factory=list)
    label_counts: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["before"] = self.before.to_dict()
        d["after"] = self.after.to_dict()
        return d


@dataclass
class RoundResult:
    models: list[MilModel]
    base_models: list[MilModel]
    records: list[list[PseudoLabelRecord]]
    report: RoundReport


def train_members(config: TrainConfig, train_bags, val_bags, fold: int, stage: int,
                  recipe: BagRecipe | None, pseudo=None,
                  init: Sequence[MilModel] | None = None) -> list[MilModel]:
    """Train ``config.ensemble`` models with independent seeds."""
    models = []
    for member in range(config.ensemble):
        model = MilModel(config.model, np.random.default_rng(derive_seed(config.seed, 1, fold, member, stage)))
        if init is not None:
            model.load_state_dict(init[member].state_dict())
        fit(model, config, train_bags, val_bags, derive_seed(config.seed, 2, fold, member, stage),
            pseudo, recipe)
        models.append(model)
    return models


def count_sources(records: Sequence[PseudoLabelRecord]) -> dict:
    out: dict[str, int] = {}
    for r in records:
        out[r.source] = out.get(r.source, 0) + 1
    return out


def pseudo_label_round(config: TrainConfig, bags: Sequence[Bag], recipe: BagRecipe | None = None,
                       fold: int = 0, rounds: int = 1) -> RoundResult:
    """Bag-only ensemble -> pseudo-labels -> retrained ensemble, on one fold.

    Pseudo-labels are computed for the training bags only. After each
    retraining the new ensemble labels the bags again; the fraction of labels
    that moved is reported per round, and with ``rounds > 1`` those labels
    drive the next retraining. Hidden instance patterns feed the agreement
    diagnostics only.
    """
    recipe = recipe or config.recipe()
    splits = kfold_split([b.label for b in bags], config.folds, config.seed)
    ids = np.array([b.id for b in bags])
    tr, va = splits[fold]
    train_bags, val_bags = split_bags(bags, ids[tr], ids[va])
    train_labels = {b.id: b.label for b in train_bags}

    base = train_members(config, train_bags, val_bags, fold, 0, recipe)
    models = base
    before_reports = [evaluate_model(m, val_bags) for m in base]
    agree_before = instance_agreement(ensemble_infer(base, val_bags), val_bags, recipe.label_rule)

    all_records, label_maps, pl_agree, changes, counts = [], [], [], [], []
    for r in range(rounds + 1):
        # the final pass only measures how far the labels drift
        records = assign_pseudo_labels(ensemble_infer(models, train_bags), train_labels)
        labels = records_to_labels(records)
        if label_maps:
            changes.append({
                "round": r + 1,
                "value_changed_fraction": label_value_change_rate(label_maps[-1], labels),
                "changed_fraction": label_change_rate(label_maps[-1], labels),
            })
        if r == rounds:
            break
        all_records.append(records)
        counts.append(count_sources(records))
        pl_agree.append(pseudo_label_agreement(labels, train_bags, recipe.label_rule))
        label_maps.append(labels)
        init = models if config.warm_start else None
        models = train_members(config, train_bags, val_bags, fold, r + 1, recipe, labels, init)
        log.info("round %d: %s", r + 1, counts[-1])

    after_reports = [evaluate_model(m, val_bags) for m in models]
    agree_after = instance_agreement(ensemble_infer(models, val_bags), val_bags, recipe.label_rule)
    report = RoundReport(
        aggregate_folds(before_reports), aggregate_folds(after_reports),
        [r.qwk for r in before_reports], [r.qwk for r in after_reports],
        agree_before, agree_after, pl_agree, changes, counts,
    )
    return RoundResult(models, base, all_records, report)
