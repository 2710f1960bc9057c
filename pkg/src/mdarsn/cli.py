"""Command line entry point: ``mdarsn <subcommand> [options]``.

Exit codes: 0 success, 2 usage error or missing input, 3 runtime failure
(diverged training, corrupt checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .exceptions import (CheckpointError, ConfigurationError, RecordParseError,
                         TrainingDivergedError)
from .fixtures import REDUCED_LEADS, FixtureSpec, write_fixtures
from .ingest import EcgRecord, load_preprocessed, preprocess, read_record, save_preprocessed
from .metrics import (ScoreWeights, challenge_score, load_weights, macro_average_precision,
                      per_class_average_precision, threshold)
from .network import MDARsn
from .split import (DatasetIndex, IndexEntry, default_class_list, filter_dataset,
                    iterative_stratify, load_folds, nested_split, read_class_list, read_index,
                    save_folds, write_index)
from .train import (EcgDataset, SearchSpace, evaluate, hyperparameter_search, load_checkpoint,
                    predict_proba, save_checkpoint, train_loop, write_history)

logger = logging.getLogger("mdarsn")

CACHE_ENV = "MDARSN_CACHE_DIR"
RECORD_SUFFIXES = (".hea", ".csv")


class UsageError(Exception):
    """Bad arguments or missing inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(path, what):
    if path is None:
        raise UsageError(f"{what} not given")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _out_dir(args, cfg: RunConfig) -> Path:
    out = cfg.path("out_dir")
    if out is None:
        raise UsageError("no output directory: pass --out or set paths.out_dir")
    return out


def _classes(args, cfg: RunConfig) -> list:
    path = getattr(args, "classes", None) or cfg.paths.get("class_list")
    if path is None:
        return default_class_list()
    return read_class_list(_require(path, "class list"))


def _weights(args, cfg: RunConfig, classes) -> ScoreWeights:
    path = getattr(args, "weights", None) or cfg.paths.get("weights")
    if path is None:
        logger.info("no weights.csv given; scoring with identity rewards")
        return ScoreWeights.identity(classes)
    return load_weights(_require(path, "weights file"), classes)


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _select_leads(record: EcgRecord, n_leads: int) -> EcgRecord:
    if record.n_leads == n_leads:
        return record
    wanted = REDUCED_LEADS.get(n_leads)
    names = list(record.lead_names)
    if wanted is None or not set(wanted) <= set(names):
        raise RecordParseError(
            f"record {record.record_id} has leads {names}; cannot select a {n_leads}-lead subset"
        )
    rows = [names.index(n) for n in wanted]
    return replace(record, signal=record.signal[rows], lead_names=list(wanted))


def _cache_key(path: Path, cfg: RunConfig, extra: str) -> str:
    h = hashlib.sha256(extra.encode())
    for p in sorted(path.parent.glob(path.stem + ".*")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(json.dumps(cfg.to_dict()["preprocess"], sort_keys=True).encode())
    h.update(str(cfg.n_leads).encode())
    return h.hexdigest()


def _load_dataset(index_path: Path, classes, n_leads: int, record_ids=None):
    index = read_index(index_path, classes)
    if record_ids is not None:
        try:
            index = index.subset(record_ids)
        except KeyError as exc:
            raise UsageError(f"record {exc.args[0]} from the folds file is not in {index_path}") from exc
    signals, masks = [], []
    for e in index.entries:
        container = _require(index_path.parent / e.path, f"container for {e.record_id}")
        rec, mask = load_preprocessed(container)
        if rec.n_leads != n_leads:
            raise UsageError(
                f"record {e.record_id} has {rec.n_leads} leads but the run is configured for {n_leads}"
            )
        signals.append(rec.signal.astype(np.float32))
        masks.append(mask)
    masks = np.array(masks, dtype=bool).reshape(len(signals), n_leads)
    return EcgDataset(signals, masks, index.label_matrix(), index.record_ids)


def _fold_split(args, fold_path: Path):
    fold_of, k, _ = load_folds(fold_path)
    try:
        return nested_split(fold_of, args.test_fold, args.val_fold, k)
    except ValueError as exc:
        raise UsageError(f"fold selection: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_fixtures(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    classes = _classes(args, cfg)
    used = tuple(classes[:args.n_classes]) if args.n_classes else ()
    spec = FixtureSpec(
        n_records=args.n_records,
        n_leads=cfg.n_leads,
        nan_lead_prob=args.nan_lead_prob,
        seed=cfg.seed,
        classes=used,
        duration_range=tuple(args.duration),
    )
    paths = write_fixtures(spec, out, classes)
    print(f"wrote {len(paths)} records to {out}")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    data_dir = _require(args.data or cfg.paths.get("data_dir"), "data directory")
    if not data_dir.is_dir():
        raise UsageError(f"data directory is not a directory: {data_dir}")
    out = _out_dir(args, cfg)
    classes = _classes(args, cfg)
    files = sorted(p for p in data_dir.iterdir() if p.suffix in RECORD_SUFFIXES)
    if not files:
        raise UsageError(f"no records (*.hea, *.csv) in {data_dir}")
    cache = Path(os.environ[CACHE_ENV]) if os.environ.get(CACHE_ENV) else None
    containers = out / "records"
    containers.mkdir(parents=True, exist_ok=True)

    entries, failed, masked = [], [], 0
    processed = {}
    for path in files:
        try:
            record = _select_leads(read_record(path), cfg.n_leads)
        except (RecordParseError, ValueError, OSError) as exc:
            logger.error("skipping %s: %s", path.name, exc)
            failed.append(path.name)
            continue
        entries.append(IndexEntry(record.record_id, record.source, frozenset(record.labels),
                                  f"records/{record.record_id}.npz"))
        processed[record.record_id] = (path, record)

    index = DatasetIndex(entries, classes)
    kept = index if args.keep_all else filter_dataset(index)
    excluded = len(index) - len(kept)
    for e in kept.entries:
        path, record = processed[e.record_id]
        cached = None
        if cache is not None:
            cached = cache / _cache_key(path, cfg, f"{args.keep_all}|{'|'.join(classes)}")
        if cached is not None and (cached / f"{e.record_id}.npz").exists():
            for suffix in (".npz", ".json"):
                shutil.copyfile(cached / f"{e.record_id}{suffix}", containers / f"{e.record_id}{suffix}")
            mask = np.array(json.loads((cached / f"{e.record_id}.json").read_text())["mask"])
        else:
            if not args.keep_all:
                record = replace(record, labels=set(e.labels))
            clean, mask = preprocess(record, cfg.preprocess)
            save_preprocessed(clean, mask, containers)
            if cached is not None:
                save_preprocessed(clean, mask, cached)
        masked += int((~np.asarray(mask, dtype=bool)).sum())
    write_index(kept, out / "index.csv")
    summary = {"records": len(kept), "masked_leads": masked, "excluded": excluded,
               "failed": len(failed), "failed_files": failed}
    _write_json(out / "summary.json", summary)
    print(f"records={len(kept)} masked_leads={masked} excluded={excluded} failed={len(failed)}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    index_path = _require(args.index, "index")
    out = _out_dir(args, cfg)
    index = read_index(index_path, _classes(args, cfg))
    try:
        fold_of = iterative_stratify(index, k=args.k, seed=cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    save_folds(fold_of, out / "folds.json", cfg.seed, args.k)
    sizes = np.bincount(list(fold_of.values()), minlength=args.k)
    print(f"wrote {out / 'folds.json'} (fold sizes {sizes.tolist()})")
    return 0


def _train_val(args, cfg, classes):
    index_path = _require(args.index, "index")
    if args.all:
        data = _load_dataset(index_path, classes, cfg.n_leads)
        return data, data, None
    folds = _require(args.folds, "folds file")
    train_ids, val_ids, test_ids = _fold_split(args, folds)
    train = _load_dataset(index_path, classes, cfg.n_leads, train_ids)
    val = _load_dataset(index_path, classes, cfg.n_leads, val_ids)
    test = _load_dataset(index_path, classes, cfg.n_leads, test_ids) if test_ids else None
    if len(train) == 0 or len(val) == 0:
        raise UsageError("empty training or validation fold")
    return train, val, test


def _model_config(cfg: RunConfig, classes):
    if len(classes) == cfg.model.d_class:
        return cfg.model
    heads = len(classes) if cfg.model.head == "mha" else cfg.model.heads
    return replace(cfg.model, d_class=len(classes), heads=heads)


def _scores(model, data, weights, t):
    s = evaluate(model, data, weights, t)
    return {"challenge_score": s["challenge_score"], "macro_ap": s["macro_ap"]}


def cmd_train(args, cfg: RunConfig) -> int:
    classes = _classes(args, cfg)
    weights = _weights(args, cfg, classes)
    out = _out_dir(args, cfg)
    train, val, _ = _train_val(args, cfg, classes)
    model = MDARsn(_model_config(cfg, classes))
    result = train_loop(model, train, val, cfg.train, cfg.augment, weights)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint", classes)
    write_history(result.history, out / "history.csv")
    report = {
        "best_epoch": result.best_epoch,
        "steps": result.steps,
        "stopped_early": result.stopped_early,
        "train": _scores(model, train, weights, cfg.train.threshold),
        "val": _scores(model, val, weights, cfg.train.threshold),
    }
    _write_json(out / "train_scores.json", report)
    print(f"train challenge={report['train']['challenge_score']:.4f} "
          f"val challenge={report['val']['challenge_score']:.4f} "
          f"val macro_ap={report['val']['macro_ap']:.4f}")
    return 0


def _read_predictions(path: Path, classes):
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["record_id"] for r in rows]
    try:
        binary = np.array([[int(r[f"label_{c}"]) for c in classes] for r in rows], dtype=bool)
    except KeyError as exc:
        raise UsageError(f"{path}: missing column {exc.args[0]}") from exc
    if rows and all(f"prob_{c}" in rows[0] for c in classes):
        probs = np.array([[float(r[f"prob_{c}"]) for c in classes] for r in rows])
    else:
        probs = binary.astype(np.float64)
    return ids, probs, binary.reshape(len(rows), len(classes))


def cmd_evaluate(args, cfg: RunConfig) -> int:
    classes = _classes(args, cfg)
    weights = _weights(args, cfg, classes)
    out = _out_dir(args, cfg)
    index_path = _require(args.index, "index")
    index = read_index(index_path, classes)
    ids = None
    if args.folds is not None:
        fold_of, k, _ = load_folds(_require(args.folds, "folds file"))
        if not 0 <= args.fold < k:
            raise UsageError(f"--fold {args.fold} outside [0, {k})")
        ids = sorted(r for r, f in fold_of.items() if f == args.fold)
        try:
            index = index.subset(ids)
        except KeyError as exc:
            raise UsageError(f"record {exc.args[0]} from the folds file is not in {index_path}") from exc
    if args.predictions is not None:
        pred_ids, probs, binary = _read_predictions(_require(args.predictions, "predictions"), classes)
        by_id = {r: i for i, r in enumerate(pred_ids)}
        missing = [r for r in index.record_ids if r not in by_id]
        if missing:
            raise UsageError(f"predictions lack record(s) {missing[:5]}")
        order = [by_id[r] for r in index.record_ids]
        probs, binary = probs[order], binary[order]
        labels = index.label_matrix()
    else:
        model, _ = _load_model(args, cfg)
        data = _load_dataset(index_path, classes, cfg.n_leads, ids)
        probs = predict_proba(model, data)
        binary = threshold(probs, cfg.train.threshold)
        labels = data.labels
    per_class = per_class_average_precision(labels, probs)
    scores = {
        "challenge_score": challenge_score(labels, binary, weights),
        "macro_ap": macro_average_precision(labels, probs),
        "per_class_ap": dict(zip(classes, per_class)),
        "n_records": int(labels.shape[0]),
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "scores.json", scores)
    print(f"challenge_score={scores['challenge_score']:.4f} macro_ap={scores['macro_ap']:.4f}")
    return 0


def _load_model(args, cfg):
    path = _require(args.checkpoint, "checkpoint")
    return load_checkpoint(path, expected_n_leads=cfg.n_leads)


def cmd_predict(args, cfg: RunConfig) -> int:
    model, ckpt_classes = _load_model(args, cfg)
    classes = ckpt_classes or _classes(args, cfg)
    out = _out_dir(args, cfg)
    index_path = _require(args.index, "index")
    data = _load_dataset(index_path, classes, cfg.n_leads)
    probs = predict_proba(model, data)
    binary = threshold(probs, cfg.train.threshold)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id"] + [f"prob_{c}" for c in classes] + [f"label_{c}" for c in classes])
        for rid, p, b in zip(data.record_ids, probs, binary):
            w.writerow([rid] + [f"{v:.8f}" for v in p] + [int(v) for v in b])
    print(f"wrote {len(data)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_search(args, cfg: RunConfig) -> int:
    classes = _classes(args, cfg)
    weights = _weights(args, cfg, classes)
    out = _out_dir(args, cfg)
    train, val, test = _train_val(args, cfg, classes)
    target = val
    if args.objective_fold == "test":
        if test is None:
            raise UsageError("--objective-fold test needs a non-empty test fold")
        target = test

    def objective(train_cfg, model_cfg):
        model = MDARsn(model_cfg)
        train_loop(model, train, val, train_cfg, cfg.augment, weights)
        return evaluate(model, target, weights, train_cfg.threshold)["challenge_score"]

    result = hyperparameter_search(objective, args.budget, cfg.train, _model_config(cfg, classes),
                                   SearchSpace())
    out.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    payload["objective_fold"] = args.objective_fold
    _write_json(out / "search_results.json", payload)
    for w in result.warnings:
        logger.warning(w)
    print(f"best objective {result.objective:.4f} after {len(result.trials)} trials")
    return 0


COMMANDS = {
    "gen-fixtures": cmd_gen_fixtures,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "search": cmd_search,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="seed for every random choice (overrides config)")
    common.add_argument("--leads", type=int, choices=(12, 6, 4, 3, 2), help="lead configuration")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--classes", type=Path, help="scored class list (default: shipped list)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mdarsn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", parents=[common], help="write a synthetic WFDB corpus")
    p.add_argument("--n-records", type=int, default=32)
    p.add_argument("--n-classes", type=int, default=0,
                   help="draw labels from the first N scored classes (0: all)")
    p.add_argument("--nan-lead-prob", type=float, default=0.0)
    p.add_argument("--duration", type=float, nargs=2, default=(10.0, 16.0), metavar=("MIN", "MAX"))

    p = sub.add_parser("preprocess", parents=[common], help="resample, filter and normalise records")
    p.add_argument("--data", type=Path, help="directory of *.hea/*.dat or *.csv records")
    p.add_argument("--keep-all", action="store_true",
                   help="skip source/label filtering (for unlabeled inference data)")

    p = sub.add_parser("split", parents=[common], help="iterative stratified folds")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)

    def fold_args(p):
        p.add_argument("--index", type=Path, required=True)
        p.add_argument("--folds", type=Path)
        p.add_argument("--test-fold", type=int, default=0)
        p.add_argument("--val-fold", type=int, default=1)
        p.add_argument("--all", action="store_true",
                       help="train on every indexed record and validate on the same set")
        p.add_argument("--weights", type=Path, help="challenge weights.csv")

    p = sub.add_parser("train", parents=[common], help="train one model")
    fold_args(p)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint or a predictions file")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--predictions", type=Path, help="score this predictions.csv instead of a model")
    p.add_argument("--folds", type=Path)
    p.add_argument("--fold", type=int, default=0, help="fold to score when --folds is given")
    p.add_argument("--weights", type=Path)

    p = sub.add_parser("predict", parents=[common], help="write predictions.csv")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("search", parents=[common], help="greedy hyperparameter search")
    fold_args(p)
    p.add_argument("--budget", type=int, default=25)
    p.add_argument("--objective-fold", choices=("val", "test"), default="val",
                   help="fold whose challenge score is maximised")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, {"n_leads": args.leads, "seed": args.seed,
                                           "out_dir": args.out})
        if getattr(args, "budget", 1) < 1:
            raise UsageError(f"--budget must be >= 1, got {args.budget}")
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
