"""Command-line driver: simulate, train, infer, eval, potential-grid.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
The CLI is a thin single-threaded wrapper; all the work happens in the
library modules.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, evaluation, synth, training
from .dataio import DataError
from .engine import NonFiniteError
from .recognition import potential_grid
from .training import TrainingError

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


def _require_missing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"refusing to overwrite {path} (pass --force)")


def _require_exists(path: Path) -> None:
    if not path.exists():
        raise DataError(f"no such file: {path}")


def cmd_simulate(args) -> int:
    config_path = Path(args.config)
    _require_exists(config_path)
    cfg = dataio.synth_config_from_dict(dataio.load_config(config_path))
    out = Path(args.out)
    items_path = out.parent / "items.json"
    abilities_path = out.parent / "abilities.json"
    for p in (out, items_path, abilities_path):
        _require_missing(p, args.force)
    dataset = synth.simulate(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_records(dataset.records, out)
    dataio.save_item_sidecar(dataset.true_items, items_path)
    dataio.save_ability_sidecar(dataset.true_abilities, abilities_path)
    print(f"wrote {len(dataset.records)} records to {out} "
          f"(+ {items_path.name}, {abilities_path.name})")
    return EXIT_OK


def cmd_train(args) -> int:
    for p in (args.data, args.config):
        _require_exists(Path(p))
    doc = dataio.load_config(Path(args.config))
    cfg = dataio.train_config_from_dict(doc)
    records = dataio.load_records(
        Path(args.data),
        first_attempt_only=args.first_attempt_only,
        min_interactions=args.min_interactions,
    )
    out = Path(args.out)
    _require_missing(out, args.force)
    resume = None
    if args.resume:
        _require_exists(Path(args.resume))
        prev = dataio.load_checkpoint(Path(args.resume))
        if prev.train_state is None:
            raise DataError(f"{args.resume}: checkpoint has no training state to resume")
        resume = prev.train_state
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        model = training.fit(records, cfg, log_stream=log_fh, resume=resume)
    finally:
        if args.log:
            log_fh.close()
    dataio.save_checkpoint(model, out)
    print(f"wrote checkpoint {out} (variant={model.variant}, "
          f"{len(model.item_ids)} items)")
    return EXIT_OK


def cmd_infer(args) -> int:
    for p in (args.ckpt, args.data):
        _require_exists(Path(p))
    model = dataio.load_checkpoint(Path(args.ckpt))
    records = dataio.load_records(Path(args.data))
    by_learner: dict[str, list] = {}
    for r in records:
        by_learner.setdefault(r.learner_id, []).append(r)
    learner_ids = sorted(by_learner)
    results = training.infer_trajectories(model, [by_learner[l] for l in learner_ids])
    rows = []
    for lid, (means, variances) in zip(learner_ids, results):
        recs = sorted(by_learner[lid], key=lambda r: r.step)
        for r, m, v in zip(recs, means, variances):
            rows.append((lid, r.step, m, v))
    dataio.write_trajectory_csv(rows, args.out)
    print(f"wrote {len(rows)} trajectory rows to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    for p in (args.ckpt, args.data):
        _require_exists(Path(p))
    model = dataio.load_checkpoint(Path(args.ckpt))
    records = dataio.load_records(Path(args.data))
    metrics: dict = {"variant": model.variant, "n_records": len(records)}

    t0 = time.monotonic()
    preds = evaluation.next_step_predictions(model, records)
    metrics["prediction_seconds"] = time.monotonic() - t0
    labels = np.array([p.actual for p in preds])
    scores = np.array([p.predicted for p in preds])
    metrics["auroc"] = evaluation.auroc(labels, scores)
    metrics["n_predictions"] = len(preds)

    if args.kfold:
        folds = evaluation.kfold_learners([r.learner_id for r in records],
                                          k=args.kfold, seed=args.fold_seed)
        fold_rows = []
        for i, fold in enumerate(folds):
            members = set(fold)
            mask = np.array([p.learner_id in members for p in preds])
            fold_rows.append({"fold": i, "n_learners": len(fold),
                              "auroc": evaluation.auroc(labels[mask], scores[mask])})
        metrics["folds"] = fold_rows
        metrics["mean_fold_auroc"] = float(np.mean([f["auroc"] for f in fold_rows]))

    if args.items or args.abilities:
        if not (args.items and args.abilities):
            raise UsageError("--items and --abilities must be given together")
        for p in (args.items, args.abilities):
            _require_exists(Path(p))
        bundle = dataio.dataset_from_files(Path(args.data), Path(args.items),
                                           Path(args.abilities))
        report = evaluation.recovery_report(model, bundle)
        metrics["ability_pearson"] = report.ability_r
        metrics["discrimination_pearson"] = report.discrimination_r
        metrics["difficulty_pearson"] = report.difficulty_r
        metrics["inference_seconds"] = report.inference_seconds

    Path(args.out).write_text(json.dumps(metrics, indent=1) + "\n", encoding="utf-8")
    print(f"wrote metrics to {args.out}")
    return EXIT_OK


def cmd_potential_grid(args) -> int:
    _require_exists(Path(args.ckpt))
    model = dataio.load_checkpoint(Path(args.ckpt))
    a_values = np.linspace(args.a_min, args.a_max, args.a_steps)
    d_values = np.linspace(args.d_min, args.d_max, args.d_steps)
    net = model.net()
    blocks = []
    for correct in (1, 0):
        mu, logvar = potential_grid(net, correct, a_values, d_values)
        blocks.append((correct, a_values, d_values, mu, logvar))
    dataio.write_grid_csv(blocks, args.out)
    print(f"wrote {2 * args.a_steps * args.d_steps} grid rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynirt",
        description="Dynamic IRT: simulate, train, infer and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    p.add_argument("--config", required=True, help="TOML config with [synth] and [model]")
    p.add_argument("--out", required=True, help="output dataset (.jsonl)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset (.jsonl)")
    p.add_argument("--config", required=True, help="TOML config with [train] and [model]")
    p.add_argument("--out", required=True, help="output checkpoint (.json)")
    p.add_argument("--log", help="write JSON-lines training log here (default stdout)")
    p.add_argument("--resume", help="checkpoint with training state to continue from")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--first-attempt-only", action="store_true",
                   help="keep only each learner's first attempt per item")
    p.add_argument("--min-interactions", type=int, default=None,
                   help="drop learners with fewer interactions than this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write smoothed ability trajectories as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV (learner, step, mean, variance)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="next-step AUROC and optional ground-truth recovery")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--items", help="items.json ground-truth sidecar")
    p.add_argument("--abilities", help="abilities.json ground-truth sidecar")
    p.add_argument("--kfold", type=int, default=None,
                   help="also report AUROC per learner fold (disjoint split)")
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output metrics JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("potential-grid", help="export the potential surface as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--a-min", type=float, default=0.5)
    p.add_argument("--a-max", type=float, default=2.0)
    p.add_argument("--a-steps", type=int, default=16)
    p.add_argument("--d-min", type=float, default=-2.0)
    p.add_argument("--d-max", type=float, default=2.0)
    p.add_argument("--d-steps", type=int, default=17)
    p.set_defaults(func=cmd_potential_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; normalize other codes
        return EXIT_USAGE if e.code not in (0,) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
