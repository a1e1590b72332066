"""Command-line entry point: ``depmil <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--threads`` and ``--deterministic``.
Failures print one JSON line ``{"error": ..., "message": ..., "path": ...}``
to standard error and exit with status 1; argument errors exit with 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .train import OUTPUT_ENV

log = logging.getLogger("depmil")

DEFAULT_OUT = "runs"


def _out_dir(args) -> Path:
    # the env var overrides --out, matching train()
    return Path(os.environ.get(OUTPUT_ENV) or getattr(args, "out", None) or DEFAULT_OUT)


def _load_config(args):
    from .train import TrainConfig

    config = TrainConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "folds_to_run", None):
        config.fold_indices = args.folds_to_run
    if getattr(args, "epochs", None):
        config.epochs = args.epochs
    return config


def _load_models(paths):
    from .checkpoint import load_checkpoint

    if not paths:
        raise ValueError("no checkpoints given")
    out = []
    for p in paths:
        model, header = load_checkpoint(p)
        out.append((model, header))
    return out


def _fold_bags(config, bags, fold: int | None, which: str):
    from .bagsynth import kfold_split
    from .train import split_bags

    if fold is None:
        return list(bags)
    splits = kfold_split([b.label for b in bags], config.folds, config.seed)
    if not 0 <= fold < len(splits):
        raise ValueError(f"fold {fold} outside [0, {len(splits)})")
    ids = np.array([b.id for b in bags])
    tr, va = splits[fold]
    train_bags, val_bags = split_bags(bags, ids[tr], ids[va])
    return train_bags if which == "train" else val_bags


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .bagsynth import BagRecipe, generate, write_bags_jsonl, write_manifest

    with open(args.recipe) as fh:
        recipe = BagRecipe.from_dict(json.load(fh))
    if args.seed is not None:
        recipe.seed = args.seed
    bags = generate(recipe)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", recipe)
    if args.write_bags:
        write_bags_jsonl(out / "bags.jsonl", bags)
    counts = np.bincount([b.label for b in bags], minlength=recipe.num_classes)
    print(json.dumps({"manifest": str(out / "manifest.json"), "bags": len(bags),
                      "label_counts": counts.tolist()}))
    return 0


def _train_members(args, config, pseudo=None, init_paths=None) -> int:
    from .bagsynth import generate
    from .checkpoint import load_checkpoint
    from .metrics import aggregate_folds, evaluate
    from .train import ensemble_predict, train

    recipe = config.recipe()
    bags = generate(recipe)
    out = _out_dir(args)
    members = args.members if args.members else 1
    init_by_member: dict[int, dict] = {}
    for p in init_paths or []:
        model, header = load_checkpoint(p)
        extra = header.get("extra", {})
        init_by_member.setdefault(int(extra.get("member", 0)), {})[int(extra.get("fold", 0))] = model
    results = [
        train(config, bags, pseudo, out, member=m, init=init_by_member.get(m))
        for m in range(members)
    ]
    reports = []
    for fold in config.folds_to_run():
        val = _fold_bags(config, bags, fold, "val")
        probs, _ = ensemble_predict([r.models[fold] for r in results], val)
        reports.append(evaluate([b.label for b in val], probs, recipe.num_classes))
    report = aggregate_folds(reports)
    report.meta.update({"method": args.name or config.model.head.variant, "members": members,
                        "pseudo_labels": pseudo is not None})
    (out / "report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_train(args) -> int:
    return _train_members(args, _load_config(args))


def cmd_retrain(args) -> int:
    from .pseudolabel import read_records, records_to_labels

    config = _load_config(args)
    pseudo = records_to_labels(read_records(args.records))
    return _train_members(args, config, pseudo, args.init)


def cmd_pseudo_label(args) -> int:
    from .bagsynth import generate
    from .pseudolabel import count_sources, assign_pseudo_labels, ensemble_infer, write_records

    config = _load_config(args)
    models = [m for m, _ in _load_models(args.checkpoints)]
    bags = _fold_bags(config, generate(config.recipe()), args.fold, "train")
    records = assign_pseudo_labels(ensemble_infer(models, bags), {b.id: b.label for b in bags},
                                   zero_top_unknown=args.zero_top_unknown)
    path = Path(args.output) if args.output else _out_dir(args) / "pseudo_labels.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_records(path, records)
    print(json.dumps({"records": str(path), "instances": len(records), "sources": count_sources(records)}))
    return 0


def cmd_eval(args) -> int:
    from .bagsynth import generate
    from .metrics import evaluate
    from .train import ensemble_predict

    config = _load_config(args)
    recipe = config.recipe()
    models = [m for m, _ in _load_models(args.checkpoints)]
    bags = _fold_bags(config, generate(recipe), args.fold, "val")
    probs, _ = ensemble_predict(models, bags)
    report = evaluate([b.label for b in bags], probs, recipe.num_classes)
    report.meta.update({"method": args.name or models[0].spec.head.variant, "checkpoints": len(models),
                        "fold": args.fold})
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return 0


def cmd_report(args) -> int:
    from .metrics import MetricsReport, reports_to_csv

    named = []
    for p in args.reports:
        with open(p) as fh:
            rep = MetricsReport.from_dict(json.load(fh))
        named.append((rep.meta.get("method") or Path(p).parent.name or Path(p).stem, rep))
    text = reports_to_csv(named)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(trials=args.trials, seed=args.seed or 0, names=args.only,
                        exhaustive=args.exhaustive, report=print)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise AssertionError(f"gradient check failed for {', '.join(failed)}")
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-identical reruns")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="depmil", description="Transformer MIL with instance pseudo-labels.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="recipe -> manifest (+ optional bag dump)")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out")
    p.add_argument("--write-bags", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    def training_args(p):
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.add_argument("--members", type=int, default=None, help="ensemble members per fold (default 1)")
        p.add_argument("--folds-to-run", type=int, nargs="+", default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--name", default=None, help="method name for the report")

    p = sub.add_parser("train", parents=[common], help="config -> checkpoints + report")
    training_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label", parents=[common], help="checkpoints + data -> JSON-lines records")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--fold", type=int, default=None, help="label only this fold's training bags")
    p.add_argument("--output")
    p.add_argument("--out")
    p.add_argument("--zero-top-unknown", action="store_true",
                   help="leave top-attention instances predicted as class 0 unknown")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("retrain", parents=[common], help="records + config -> checkpoints + report")
    training_args(p)
    p.add_argument("--records", required=True)
    p.add_argument("--init", nargs="+", default=None, help="checkpoints to continue from")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", parents=[common], help="checkpoints + data -> report")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--fold", type=int, default=None, help="evaluate on this fold's validation bags")
    p.add_argument("--name", default=None)
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="report JSON files -> CSV table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--only", nargs="+", default=None, help="case names to run")
    p.add_argument("--exhaustive", action="store_true",
                   help="check composite layers coordinate by coordinate")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _error_line(exc: BaseException) -> str:
    path = getattr(exc, "filename", None)
    msg = exc.strerror if isinstance(exc, OSError) and exc.strerror else str(exc)
    return json.dumps({"error": type(exc).__name__, "message": msg, "path": path})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = 1 if args.deterministic else args.threads
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        log.debug("command failed", exc_info=True)
        print(_error_line(exc), file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
