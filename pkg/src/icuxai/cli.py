"""The ``icuxai`` command line: generate/preprocess -> train -> eval ->
explain -> perturb -> report.

Every subcommand writes into a run directory: its artifacts, an appended
``log.jsonl`` of structured events, and a ``manifest.json`` entry
(resolved options + seed + package version) sufficient to re-execute the
run. Options resolve flag > INI config section > built-in default, where
the INI section is named after the subcommand::

    [train]
    epochs = 40
    learning_rate = 0.003

Exit codes: 0 success, 1 usage error (bad flags, bad option values),
2 data error (missing or malformed inputs, rejected records).

Randomness policy: one ``--seed`` per invocation; components derive
their own streams from it by hashing a fixed label, so e.g. the train
split cannot shift when a model hyperparameter changes.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (CSV_HEADER, EXPLAINER_KINDS,
                          aggregate_feature_attributions, make_explainer)
from .errors import DataError
from .metrics import auc_pr, auc_roc
from .model import ModelConfig, TriModalNet, load_checkpoint, save_checkpoint
from .perturbation import compare_explainers, plot_table, write_curves_csv, \
    write_summary_csv
from .preprocess import NormalValueTable, build_dataset
from .records import MODALITIES, MultimodalDataset
from .synthetic import SyntheticSpec, generate_synthetic, ground_truth_json
from .training import TrainConfig, train_model


class UsageError(ValueError):
    """Bad flag or option value; maps to exit code 1."""


def derive_seed(master: int, label: str) -> int:
    """Deterministic per-component substream of the run seed."""
    ss = np.random.SeedSequence((int(master), zlib.crc32(label.encode("utf-8"))))
    return int(ss.generate_state(1, np.uint32)[0])


# --- run-directory plumbing -----------------------------------------------------


def _json_safe(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON-serializable")


def _run_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _logger(out: Path):
    path = out / "log.jsonl"

    def log(event: dict) -> None:
        with path.open("a") as handle:
            handle.write(json.dumps(event, sort_keys=True,
                                    default=_json_safe) + "\n")
    return log


def _manifest(out: Path, command: str, options: dict, seed: int) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[command] = {"options": options, "seed": int(seed),
                         "version": __version__}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True,
                               default=_json_safe) + "\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def _default_inside(path, filename: str) -> Path:
    """Accept a run directory in place of the file it contains."""
    path = Path(path)
    return path / filename if path.is_dir() else path


def _load_dataset(path) -> MultimodalDataset:
    path = _default_inside(path, "data.npz")
    try:
        return MultimodalDataset.load(path)
    except FileNotFoundError:
        raise DataError(f"dataset file {path} does not exist") from None
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None


def _load_model(path):
    path = _default_inside(path, "model.npz")
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} does not exist") from None


# --- option resolution -------------------------------------------------------------


def _cast_option(raw: str, cast, name: str):
    if cast is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"option {name!r} wants a boolean, got {raw!r}")
    try:
        return cast(raw)
    except ValueError:
        raise UsageError(f"option {name!r} wants {cast.__name__}, "
                         f"got {raw!r}") from None


def resolve_options(args, spec: dict[str, tuple]) -> dict:
    """Merge flags, the INI section for this subcommand, and defaults."""
    section: dict[str, str] = {}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} does not exist")
        try:
            parser.read_string(path.read_text())
        except configparser.Error as e:
            raise DataError(f"config file {path} is not valid INI: {e}") from None
        if parser.has_section(args.command):
            section = dict(parser[args.command])
        unknown = set(section) - set(spec)
        if unknown:
            raise UsageError(f"config section [{args.command}] has unknown "
                             f"options: {sorted(unknown)}")
    resolved = {}
    for name, (cast, default) in spec.items():
        flag = getattr(args, name.replace("-", "_"), None)
        if flag is not None:
            resolved[name] = flag
        elif name in section:
            resolved[name] = _cast_option(section[name], cast, name)
        else:
            resolved[name] = default
    return resolved


def _parse_active(raw: str) -> tuple[str, ...]:
    active = tuple(part.strip() for part in raw.split(",") if part.strip())
    bad = set(active) - set(MODALITIES)
    if bad or not active:
        raise UsageError(f"--active wants a non-empty subset of "
                         f"{','.join(MODALITIES)}, got {raw!r}")
    return active


def _parse_kinds(raw: str) -> tuple[str, ...]:
    if raw.strip() == "all":
        return EXPLAINER_KINDS
    kinds = tuple(part.strip() for part in raw.split(",") if part.strip())
    bad = set(kinds) - set(EXPLAINER_KINDS)
    if bad or not kinds:
        raise UsageError(f"unknown explainer kinds {sorted(bad)}; choose from "
                         f"{', '.join(EXPLAINER_KINDS)} or 'all'")
    return kinds


# --- split handling -----------------------------------------------------------------


def _index_of(ds: MultimodalDataset) -> dict[str, int]:
    return {rid: i for i, rid in enumerate(ds.ids)}


def _ids_to_idx(ds, ids, what: str) -> np.ndarray:
    index = _index_of(ds)
    missing = [rid for rid in ids if rid not in index]
    if missing:
        raise DataError(f"{what} references {len(missing)} record ids absent "
                        f"from the dataset (first: {missing[0]!r})")
    return np.array([index[rid] for rid in ids], dtype=np.int64)


def _split_ids(ds: MultimodalDataset, seed: int, val_frac: float,
               test_frac: float) -> dict[str, list[str]]:
    """Use the dataset's stored stay-level split when present, otherwise
    draw a deterministic one from the run seed."""
    stored = ds.meta.get("split")
    if stored:
        return {part: list(stored[part]) for part in ("train", "val", "test")}
    if not 0.0 <= val_frac < 1.0 or not 0.0 <= test_frac < 1.0 \
            or val_frac + test_frac >= 1.0:
        raise UsageError("--val-frac and --test-frac must be non-negative "
                         "and leave room for training data")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(ds))
    n_test = int(len(ds) * test_frac)
    n_val = int(len(ds) * val_frac)
    test = order[:n_test]
    val = order[n_test:n_test + n_val]
    train = order[n_test + n_val:]
    return {"train": sorted(ds.ids[i] for i in train),
            "val": sorted(ds.ids[i] for i in val),
            "test": sorted(ds.ids[i] for i in test)}


# --- subcommands --------------------------------------------------------------------


SYNTH_OPTIONS = {
    "records": (int, 2000),
    "positive-rate": (float, 0.10),
    "noise-rate": (float, 0.05),
    "complementary": (bool, False),
    "hours": (int, 24),
    "event-dim": (int, 20),
    "note-len": (int, 48),
    "vocab-size": (int, 120),
    "vitals-steps": (int, 64),
    "vitals-channels": (int, 8),
    "event-feature": (int, 2),
    "event-threshold": (float, 2.5),
    "token-id": (int, 7),
    "vitals-channel": (int, 3),
    "vitals-amplitude": (float, 4.0),
    "seed": (int, 0),
}


def cmd_synth(args) -> None:
    opts = resolve_options(args, SYNTH_OPTIONS)
    out = _run_dir(args.out)
    log = _logger(out)
    spec = SyntheticSpec(
        n_records=opts["records"], positive_rate=opts["positive-rate"],
        noise_rate=opts["noise-rate"], complementary=opts["complementary"],
        hours=opts["hours"], event_dim=opts["event-dim"],
        note_len=opts["note-len"], vocab_size=opts["vocab-size"],
        vitals_steps=opts["vitals-steps"],
        vitals_channels=opts["vitals-channels"],
        event_feature=opts["event-feature"],
        event_threshold=opts["event-threshold"], token_id=opts["token-id"],
        vitals_channel=opts["vitals-channel"],
        vitals_amplitude=opts["vitals-amplitude"])
    log({"event": "start", "command": "synth", "options": opts})
    started = time.perf_counter()
    ds, truth = generate_synthetic(spec, seed=opts["seed"])
    ds.save(out / "data.npz")
    (out / "ground_truth.json").write_text(ground_truth_json(truth))
    _manifest(out, "synth", opts, opts["seed"])
    log({"event": "done", "command": "synth", "records": len(ds),
         "positives": int(ds.labels.sum()),
         "elapsed_s": time.perf_counter() - started})
    print(f"wrote {out / 'data.npz'} ({len(ds)} records, "
          f"{int(ds.labels.sum())} positive) and ground_truth.json")


PREPROCESS_OPTIONS = {
    "max-words": (int, 512),
    "min-count": (int, 2),
    "steps": (int, 480),
    "hours": (int, 24),
    "train-frac": (float, 0.64),
    "val-frac": (float, 0.16),
    "seed": (int, 0),
}


def cmd_preprocess(args) -> None:
    opts = resolve_options(args, PREPROCESS_OPTIONS)
    out = _run_dir(args.out)
    log = _logger(out)
    table = NormalValueTable.load(args.normal_values) \
        if args.normal_values else None
    test_frac = 1.0 - opts["train-frac"] - opts["val-frac"]
    if test_frac <= 0:
        raise UsageError("--train-frac and --val-frac leave no test data")
    log({"event": "start", "command": "preprocess",
         "options": {**opts, "events": str(args.events)}})
    started = time.perf_counter()
    ds = build_dataset(
        args.events, args.notes, args.vitals, args.labels, table=table,
        seed=opts["seed"],
        fractions=(opts["train-frac"], opts["val-frac"], test_frac),
        max_words=opts["max-words"], min_count=opts["min-count"],
        hours=opts["hours"], steps=opts["steps"], log_fn=log)
    ds.save(out / "data.npz")
    _manifest(out, "preprocess", opts, opts["seed"])
    log({"event": "done", "command": "preprocess", "records": len(ds),
         "rejected": len(ds.meta.get("rejected", [])),
         "vocab": len(ds.meta.get("vocab", {})),
         "elapsed_s": time.perf_counter() - started})
    print(f"wrote {out / 'data.npz'} ({len(ds)} records, "
          f"{len(ds.meta.get('rejected', []))} rejected)")


TRAIN_OPTIONS = {
    "width": (int, 64),
    "heads": (int, 4),
    "ffn-width": (int, 128),
    "dropout": (float, 0.1),
    "blocks": (int, 2),
    "fusion-hidden": (int, 64),
    "bias-free": (bool, False),
    "epochs": (int, 30),
    "batch-size": (int, 64),
    "learning-rate": (float, 1e-3),
    "class-weight": (float, 1.0),
    "upsample": (bool, True),
    "patience": (int, 10),
    "clip-norm": (float, 1.0),
    "active": (str, "events,notes,vitals"),
    "val-frac": (float, 0.16),
    "test-frac": (float, 0.20),
    "seed": (int, 0),
}


def cmd_train(args) -> None:
    opts = resolve_options(args, TRAIN_OPTIONS)
    out = _run_dir(args.out)
    log = _logger(out)
    ds = _load_dataset(args.data)
    active = _parse_active(opts["active"])
    seed = opts["seed"]
    split = _split_ids(ds, seed, opts["val-frac"], opts["test-frac"])
    train_idx = _ids_to_idx(ds, split["train"], "train split")
    val_idx = _ids_to_idx(ds, split["val"], "val split")
    if train_idx.size < 2 or len(np.unique(ds.labels[train_idx])) < 2:
        raise DataError("training split needs records from both classes")
    if val_idx.size == 0 or len(np.unique(ds.labels[val_idx])) < 2:
        print("warning: validation split lacks both classes; training "
              "without early stopping", file=sys.stderr)
        val_idx = None

    vocab = ds.meta.get("vocab")
    config = ModelConfig(
        width=opts["width"], heads=opts["heads"], ffn_width=opts["ffn-width"],
        dropout=opts["dropout"], event_blocks=opts["blocks"],
        note_blocks=opts["blocks"], vitals_blocks=opts["blocks"],
        event_hours=ds.events.shape[1], event_dim=ds.events.shape[2],
        note_len=ds.notes.shape[1],
        vocab_size=max(len(vocab) if vocab else int(ds.notes.max()) + 1, 3),
        vitals_steps=ds.vitals.shape[1], vitals_channels=ds.vitals.shape[2],
        fusion_hidden=opts["fusion-hidden"], bias_free=opts["bias-free"],
        seed=derive_seed(seed, "model"))
    train_config = TrainConfig(
        batch_size=opts["batch-size"], learning_rate=opts["learning-rate"],
        dropout=opts["dropout"], encoder_blocks=opts["blocks"],
        heads=opts["heads"], class_weight=opts["class-weight"],
        epochs=opts["epochs"], seed=derive_seed(seed, "train"),
        upsample=opts["upsample"], patience=opts["patience"],
        clip_norm=opts["clip-norm"])

    log({"event": "start", "command": "train", "options": opts,
         "records": len(ds), "split_sizes": {k: len(v)
                                             for k, v in split.items()}})
    started = time.perf_counter()
    model = TriModalNet(config)
    result = train_model(model, ds, train_config, train_idx=train_idx,
                         val_idx=val_idx, active=active, log_fn=log)
    vocab_list = None
    if vocab:
        vocab_list = [w for w, _ in sorted(vocab.items(), key=lambda kv: kv[1])]
    save_checkpoint(model, out / "model.npz", vocab=vocab_list,
                    preprocess=ds.meta.get("stats"),
                    extra={"split": split, "active": list(active),
                           "seed": seed, "best_epoch": result.best_epoch})
    _write_csv(out / "history.csv", ("epoch", "loss", "lr", "val_auc"),
               [(h["epoch"], h["loss"], h["lr"], h.get("val_auc", ""))
                for h in result.history])
    _manifest(out, "train", opts, seed)
    log({"event": "done", "command": "train", "epochs": len(result.history),
         "best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
         "stopped_early": result.stopped_early,
         "elapsed_s": time.perf_counter() - started})
    print(f"wrote {out / 'model.npz'} "
          f"(best epoch {result.best_epoch}, "
          f"val AUC {result.best_val_auc if result.best_val_auc is not None else 'n/a'})")


EVAL_OPTIONS = {
    "split": (str, "test"),
    "seed": (int, 0),
}


def cmd_eval(args) -> None:
    opts = resolve_options(args, EVAL_OPTIONS)
    out = _run_dir(args.out)
    log = _logger(out)
    model, meta = _load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    wanted = opts["split"]
    if wanted not in ("train", "val", "test", "all"):
        raise UsageError(f"--split must be train, val, test or all, "
                         f"got {wanted!r}")
    active = tuple(meta.get("extra", {}).get("active", MODALITIES))
    stored = meta.get("extra", {}).get("split")
    if wanted == "all":
        parts = [("all", np.arange(len(ds)))]
    else:
        if not stored:
            raise DataError("checkpoint stores no train/val/test split; "
                            "evaluate with --split all")
        parts = [(wanted, _ids_to_idx(ds, stored[wanted], f"{wanted} split"))]
    log({"event": "start", "command": "eval", "options": opts})
    rows = []
    for name, idx in parts:
        if idx.size == 0:
            raise DataError(f"split {name!r} holds no records")
        sub = ds.subset(idx)
        probs = model.predict_proba(sub.events, sub.notes, sub.vitals,
                                    active=active)[:, 1]
        rows.append((name, int(idx.size), int(sub.labels.sum()),
                     auc_roc(sub.labels, probs), auc_pr(sub.labels, probs)))
        log({"event": "metrics", "split": name, "n": int(idx.size),
             "auc_roc": rows[-1][3], "auc_pr": rows[-1][4]})
    _write_csv(out / "metrics.csv",
               ("split", "n", "positives", "auc_roc", "auc_pr"), rows)
    _manifest(out, "eval", opts, opts["seed"])
    for name, n, pos, roc, pr in rows:
        print(f"{name}: n={n} positives={pos} auc_roc={roc:.4f} auc_pr={pr:.4f}")


EXPLAIN_OPTIONS = {
    "kinds": (str, "lrptrans"),
    "records": (int, 20),
    "target-class": (int, 1),
    "steps": (int, 20),
    "min-token-count": (int, 1),
    "seed": (int, 0),
}


def _picked_records(ds, meta, args, budget: int) -> list[int]:
    if args.ids:
        ids = [part.strip() for part in args.ids.split(",") if part.strip()]
        return list(_ids_to_idx(ds, ids, "--ids"))
    stored = meta.get("extra", {}).get("split")
    if stored:
        idx = _ids_to_idx(ds, stored["test"], "test split")
    else:
        idx = np.arange(len(ds))
    return list(idx[:budget])


def cmd_explain(args) -> None:
    opts = resolve_options(args, EXPLAIN_OPTIONS)
    out = _run_dir(args.out)
    log = _logger(out)
    model, meta = _load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    kinds = _parse_kinds(opts["kinds"])
    picked = _picked_records(ds, meta, args, opts["records"])
    if not picked:
        raise DataError("no records selected to explain")
    log({"event": "start", "command": "explain", "options": opts,
         "records": len(picked)})
    started = time.perf_counter()
    names = ds.meta.get("event_names")
    channels = ds.meta.get("channel_names")
    vocab = ds.meta.get("vocab")
    for kind in kinds:
        explainer = make_explainer(
            kind, model, seed=derive_seed(opts["seed"], f"explain-{kind}"),
            steps=opts["steps"])
        reports = [explainer.explain(ds.record(i), opts["target-class"])
                   for i in picked]
        rows = []
        for report in reports:
            rows.extend((report.record_id,) + row for row in report.csv_rows())
        _write_csv(out / f"attributions_{kind}.csv",
                   ("record_id",) + CSV_HEADER, rows)
        ranking = aggregate_feature_attributions(
            reports, event_names=names, channel_names=channels, vocab=vocab,
            min_token_count=opts["min-token-count"])
        (out / f"aggregate_{kind}.json").write_text(
            json.dumps(ranking, indent=2, sort_keys=True) + "\n")
        log({"event": "explained", "explainer": kind,
             "records": len(reports)})
    _manifest(out, "explain", opts, opts["seed"])
    log({"event": "done", "command": "explain",
         "elapsed_s": time.perf_counter() - started})
    print(f"wrote attributions_*.csv and aggregate_*.json for "
          f"{', '.join(kinds)} ({len(picked)} records)")


PERTURB_OPTIONS = {
    "explainers": (str, "all"),
    "records": (int, 50),
    "order": (str, "ascending"),
    "steps": (int, 20),
    "seed": (int, 0),
}


def cmd_perturb(args) -> None:
    opts = resolve_options(args, PERTURB_OPTIONS)
    out = _run_dir(args.out)
    log = _logger(out)
    model, meta = _load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    kinds = _parse_kinds(opts["explainers"])
    if opts["order"] not in ("ascending", "descending"):
        raise UsageError(f"--order must be ascending or descending, "
                         f"got {opts['order']!r}")
    picked = _picked_records(ds, meta, args, opts["records"])
    subset = ds.subset(np.array(picked, dtype=np.int64))
    if len(set(subset.labels.tolist())) < 2:
        raise DataError("perturbation needs both classes among the selected "
                        "records; widen --records or pass --ids")
    log({"event": "start", "command": "perturb", "options": opts,
         "records": len(subset)})
    started = time.perf_counter()
    curves = compare_explainers(
        model, subset, kinds=kinds, seed=derive_seed(opts["seed"], "perturb"),
        order=opts["order"], steps=opts["steps"], log_fn=log)
    write_curves_csv(curves, out / "curves.csv")
    write_summary_csv(curves, out / "au_summary.csv")
    (out / "curves.txt").write_text(plot_table(curves) + "\n")
    _manifest(out, "perturb", opts, opts["seed"])
    log({"event": "done", "command": "perturb",
         "elapsed_s": time.perf_counter() - started})
    for curve in curves:
        print(f"{curve.explainer}: AU {curve.au:.4f}")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"report needs {path}, which does not exist; "
                        f"run `icuxai {producer}` into this directory first")
    return path


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as handle:
        return list(csv.DictReader(handle))


def _md_table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(" --- " for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return lines


def _fmt(raw: str, digits: int = 4) -> str:
    try:
        return f"{float(raw):.{digits}f}"
    except (TypeError, ValueError):
        return str(raw)


def cmd_report(args) -> None:
    run = Path(args.run)
    if not run.is_dir():
        raise DataError(f"run directory {run} does not exist")
    metrics = _read_csv(_require(run / "metrics.csv", "eval"))
    summary = _read_csv(_require(run / "au_summary.csv", "perturb"))
    curves = _read_csv(_require(run / "curves.csv", "perturb"))
    aggregates = sorted(run.glob("aggregate_*.json"))
    if not aggregates:
        raise DataError(f"report needs {run / 'aggregate_<kind>.json'}, which "
                        f"does not exist; run `icuxai explain` into this "
                        f"directory first")

    lines = ["# Run report", ""]
    manifest_path = run / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        lines += ["## Provenance", ""]
        lines += _md_table(("command", "seed", "version"),
                           [(cmd, entry.get("seed"), entry.get("version"))
                            for cmd, entry in sorted(manifest.items())])
        lines.append("")

    lines += ["## Classification metrics", ""]
    lines += _md_table(("split", "n", "positives", "AUC-ROC", "AUC-PR"),
                       [(r["split"], r["n"], r["positives"],
                         _fmt(r["auc_roc"]), _fmt(r["auc_pr"]))
                        for r in metrics])
    lines.append("")

    lines += ["## Perturbation faithfulness", "",
              "Area under the deletion curve (AUC-ROC vs fraction of "
              "least-relevant features removed); higher is better.", ""]
    ranked = sorted(summary, key=lambda r: -float(r["au"]))
    lines += _md_table(("explainer", "AU"),
                       [(r["explainer"], _fmt(r["au"])) for r in ranked])
    lines += ["", "```"]
    by_explainer: dict[str, list[tuple[float, float]]] = {}
    for row in curves:
        by_explainer.setdefault(row["explainer"], []).append(
            (float(row["fraction"]), float(row["auc_roc"])))
    fractions = sorted({f for pts in by_explainer.values() for f, _ in pts})
    kinds = list(by_explainer)
    lines.append("fraction " + " ".join(kinds))
    for f in fractions:
        cells = [f"{f:.3f}"]
        for kind in kinds:
            match = [v for ff, v in by_explainer[kind] if ff == f]
            cells.append(f"{match[0]:.6f}" if match else "-")
        lines.append(" ".join(cells))
    lines += ["```", ""]

    top_k = args.top_k
    for path in aggregates:
        kind = path.stem.removeprefix("aggregate_")
        ranking = json.loads(path.read_text())
        lines += [f"## Feature ranking ({kind})", ""]
        for modality in MODALITIES:
            rows = ranking.get(modality, [])
            if not rows:
                continue
            positive = [r for r in rows if float(r[1]) > 0][:top_k]
            lines += [f"### {modality}: top {len(positive)} positive", ""]
            lines += _md_table(("feature", "mean attribution", "records"),
                               [(n, _fmt(v), c) for n, v, c in positive])
            negative = [r for r in reversed(rows) if float(r[1]) < 0][:top_k]
            if negative:
                lines += ["", f"### {modality}: top {len(negative)} negative", ""]
                lines += _md_table(("feature", "mean attribution", "records"),
                                   [(n, _fmt(v), c) for n, v, c in negative])
            lines.append("")

    heat_source = run / "attributions_lrptrans.csv"
    if not heat_source.exists():
        candidates = sorted(run.glob("attributions_*.csv"))
        heat_source = candidates[0] if candidates else None
    if heat_source is not None:
        rows = _read_csv(heat_source)
        kind = heat_source.stem.removeprefix("attributions_")
        by_record: dict[str, list[dict]] = {}
        for row in rows:
            by_record.setdefault(row["record_id"], []).append(row)
        lines += [f"## Per-record attribution detail ({kind})", ""]
        for rid in list(by_record)[:args.heat_records]:
            lines += [f"### record {rid}", ""]
            cells = sorted(by_record[rid],
                           key=lambda r: -abs(float(r["attribution"])))
            lines += _md_table(
                ("modality", "feature", "time", "attribution"),
                [(r["modality"], r["feature_id"], r["time_index"],
                  _fmt(r["attribution"], 6)) for r in cells[:top_k]])
            lines.append("")

    out = Path(args.out) if args.out else run / "report.md"
    out.write_text("\n".join(lines).rstrip() + "\n")
    print(f"wrote {out}")


# --- parser --------------------------------------------------------------------------


def _add_option_flags(parser, spec: dict[str, tuple]) -> None:
    for name, (cast, default) in spec.items():
        flag = f"--{name}"
        if cast is bool:
            parser.add_argument(flag, action=argparse.BooleanOptionalAction,
                                default=None,
                                help=f"(default {default})")
        else:
            parser.add_argument(flag, type=cast, default=None,
                                metavar=cast.__name__.upper(),
                                help=f"(default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icuxai",
        description="Tri-modal mortality modeling with conservation-aware "
                    "attributions: generate or preprocess data, train, "
                    "evaluate, explain, perturb, report.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic cohort with "
                                         "planted signals")
    synth.add_argument("--out", required=True, help="run directory")
    synth.add_argument("--config", help="INI file with a [synth] section")
    _add_option_flags(synth, SYNTH_OPTIONS)
    synth.set_defaults(handler=cmd_synth)

    pre = sub.add_parser("preprocess", help="build a dataset from raw "
                                            "CSV/JSONL exports")
    pre.add_argument("--events", required=True, help="events CSV")
    pre.add_argument("--notes", required=True, help="notes JSONL")
    pre.add_argument("--vitals", required=True, help="vitals CSV")
    pre.add_argument("--labels", required=True, help="labels CSV")
    pre.add_argument("--out", required=True, help="run directory")
    pre.add_argument("--normal-values", help="override the packaged "
                                             "normal-value table (JSON)")
    pre.add_argument("--config", help="INI file with a [preprocess] section")
    _add_option_flags(pre, PREPROCESS_OPTIONS)
    pre.set_defaults(handler=cmd_preprocess)

    train = sub.add_parser("train", help="train the tri-modal classifier")
    train.add_argument("--data", required=True, help="dataset file (.npz)")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--config", help="INI file with a [train] section")
    _add_option_flags(train, TRAIN_OPTIONS)
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="compute AUC-ROC / AUC-PR for a "
                                     "checkpoint")
    ev.add_argument("--checkpoint", "--model", dest="checkpoint",
                required=True, help="model.npz or its run directory")
    ev.add_argument("--data", required=True,
                help="dataset .npz or its run directory")
    ev.add_argument("--out", required=True, help="run directory")
    ev.add_argument("--config", help="INI file with an [eval] section")
    _add_option_flags(ev, EVAL_OPTIONS)
    ev.set_defaults(handler=cmd_eval)

    ex = sub.add_parser("explain", help="attribute predictions to inputs")
    ex.add_argument("--checkpoint", "--model", dest="checkpoint",
                required=True, help="model.npz or its run directory")
    ex.add_argument("--data", required=True,
                help="dataset .npz or its run directory")
    ex.add_argument("--out", required=True, help="run directory")
    ex.add_argument("--ids", help="comma-separated record ids (default: "
                                  "first --records of the test split)")
    ex.add_argument("--config", help="INI file with an [explain] section")
    _add_option_flags(ex, EXPLAIN_OPTIONS)
    ex.set_defaults(handler=cmd_explain)

    pt = sub.add_parser("perturb", help="deletion-curve faithfulness "
                                        "comparison of explainers")
    pt.add_argument("--checkpoint", "--model", dest="checkpoint",
                required=True, help="model.npz or its run directory")
    pt.add_argument("--data", required=True,
                help="dataset .npz or its run directory")
    pt.add_argument("--out", required=True, help="run directory")
    pt.add_argument("--ids", help="comma-separated record ids")
    pt.add_argument("--config", help="INI file with a [perturb] section")
    _add_option_flags(pt, PERTURB_OPTIONS)
    pt.set_defaults(handler=cmd_perturb)

    rp = sub.add_parser("report", help="render a markdown summary of a run "
                                       "directory")
    rp.add_argument("--run", required=True, help="directory holding eval/"
                                                 "explain/perturb outputs")
    rp.add_argument("--out", help="report path (default RUN/report.md)")
    rp.add_argument("--top-k", type=int, default=10)
    rp.add_argument("--heat-records", type=int, default=3)
    rp.set_defaults(handler=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        args.handler(args)
        return 0
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(run())
