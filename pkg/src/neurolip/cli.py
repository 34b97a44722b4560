"""Command-line front end: synth, train, eval, attmap, ablate.

Settings come from (lowest to highest precedence) built-in defaults, the
``key = value`` file given by ``--config``, then explicit command-line flags.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure,
4 undefined metric.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .connectome import (CohortParseError, ConfigError, SynthConfig, cohort_hash, read_cohort,
                         synth_cohort, write_cohort)
from .encoders import EncoderConfig
from .experiments import ABLATION_GRID, ablation, format_table, holdout
from .metrics import METRIC_NAMES, UndefinedMetricError, mean_report, write_report
from .phenotext import ATTRIBUTES, SENSITIVE_CHOICES, write_vocab
from .trainer import (LOSS_LOG_COLUMNS, DivergenceError, SplitError, TrainConfig, _labels,
                      evaluate, stratified_kfold, train_fold)
from .ttca import activation_map, compose_maps, export_map

log = logging.getLogger("neurolip")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_METRIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# configuration ------------------------------------------------------------------------

ENCODER_KEYS = ("n_clusters", "embed_dim", "heads", "text_layers", "node_hidden", "text_hidden")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("encoder", "attrs"))
SYNTH_KEYS = tuple(f.name for f in dataclasses.fields(SynthConfig))
KNOWN_KEYS = set(ENCODER_KEYS) | set(TRAIN_KEYS) | set(SYNTH_KEYS)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return parse_config_text(Path(path).read_text(), str(path))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("on", "true", "yes", "1"):
            return True
        if low in ("off", "false", "no", "0"):
            return False
        raise UsageError(f"expected on/off, got {value!r}")
    if value.lower() == "none":
        return None
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise UsageError(f"cannot parse {value!r} as {type(default).__name__}") from None
    return value


def _apply(obj, settings: dict, keys):
    updates = {}
    for k in keys:
        if k in settings:
            default = getattr(obj, k)
            if default is None:  # fields defaulting to None hold ints or names
                val = settings[k]
                updates[k] = None if str(val).lower() == "none" else (
                    int(val) if str(val).lstrip("-").isdigit() else val)
            else:
                updates[k] = _coerce(str(settings[k]), default)
    return dataclasses.replace(obj, **updates)


def synth_config(settings: dict) -> SynthConfig:
    settings = dict(settings)
    if "sensitive" in settings and "sensitive_attribute" not in settings:
        settings["sensitive_attribute"] = settings["sensitive"]
    return _apply(SynthConfig(), settings, SYNTH_KEYS)


def train_config(settings: dict, n_rois: int) -> TrainConfig:
    cfg = _apply(TrainConfig(), settings, TRAIN_KEYS)
    if cfg.sensitive is not None and cfg.sensitive not in SENSITIVE_CHOICES:
        raise UsageError(f"sensitive must be one of {SENSITIVE_CHOICES} or none")
    enc_fields = {k: int(settings[k]) for k in ENCODER_KEYS if k in settings}
    try:
        enc = EncoderConfig(n_rois=n_rois, seed=cfg.seed, **enc_fields)
        cfg = dataclasses.replace(cfg, encoder=enc)
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _flag_settings(args, names) -> dict:
    out = {}
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            out[name] = str(val)
    return out


def write_kv(path, items) -> None:
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k} = {v}\n")


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# commands ------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    settings = read_config(args.config)
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    cfg = synth_config(settings)
    try:
        subjects = synth_cohort(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    write_cohort(subjects, out)
    write_vocab(out / "vocab.txt")
    write_kv(out / "manifest.txt",
             [*((k, v) for k, v in dataclasses.asdict(cfg).items()),
              ("n_written", len(subjects)), ("cohort_hash", cohort_hash(out))])
    print(f"wrote {len(subjects)} subjects (N={cfg.n_rois}) to {out}")
    return EXIT_OK


def _load_cohort(path, sensitive: str | None):
    path = Path(path)
    meta = read_kv(path / "manifest.txt") if (path / "manifest.txt").is_file() else {}
    try:
        return read_cohort(path, sensitive_attribute=sensitive or meta.get("sensitive_attribute", "sex"),
                           dx_name=meta.get("dx_name"))
    except CohortParseError as exc:
        raise UsageError(str(exc)) from None


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _train_one(job):
    fold, train, cfg = job
    return fold, train_fold(train, cfg)


def cmd_train(args) -> int:
    settings = read_config(args.config)
    settings.update(_flag_settings(args, ("seed", "folds", "epochs", "lr", "sensitive")))
    if args.attn_loss is not None:
        settings["attn_loss"] = args.attn_loss
    if args.neg_grad is not None:
        settings["neg_grad"] = args.neg_grad
    subjects = _load_cohort(args.cohort, settings.get("sensitive"))
    cfg = train_config(settings, subjects[0].matrix.shape[0])
    digest = cohort_hash(args.cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    train_pool, test = holdout(subjects, cfg.seed)
    try:
        splits = stratified_kfold(_labels(train_pool), cfg.folds, cfg.seed)
    except SplitError as exc:
        raise UsageError(str(exc)) from None
    jobs = []
    for fold, (tr_idx, _) in enumerate(splits):
        fold_cfg = dataclasses.replace(cfg, seed=_fold_seed(cfg.seed, fold))
        fold_cfg = dataclasses.replace(fold_cfg, encoder=dataclasses.replace(cfg.encoder, seed=fold_cfg.seed))
        jobs.append((fold, [train_pool[i] for i in tr_idx], fold_cfg))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = dict(pool.map(_train_one, jobs))
    else:
        results = dict(_train_one(j) for j in jobs)

    manifest = [(f"config.{k}", v) for k, v in sorted(settings.items())]
    manifest += [("seed", cfg.seed), ("folds", cfg.folds), ("attn_loss", cfg.attn_loss),
                 ("neg_grad", cfg.neg_grad), ("sensitive", cfg.sensitive),
                 ("cohort", Path(args.cohort).resolve()), ("cohort_hash", digest),
                 ("n_train_pool", len(train_pool)), ("n_test", len(test))]
    (out / "test_ids.txt").write_text("\n".join(s.id for s in test) + "\n")
    for fold in range(cfg.folds):
        res = results[fold]
        fdir = out / f"fold{fold}"
        fdir.mkdir(exist_ok=True)
        val = [train_pool[i] for i in splits[fold][1]]
        ckpt = Checkpoint.from_result(res, meta={"cohort_hash": digest, "fold": fold,
                                                 "test_ids": [s.id for s in test],
                                                 "val_ids": [s.id for s in val]})
        save_checkpoint(ckpt, fdir / "checkpoint.txt")
        with open(fdir / "loss_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_LOG_COLUMNS)
            for row in res.loss_log:
                w.writerow([row["epoch"]] + [format(row.get(c, 0.0), ".17g") for c in LOSS_LOG_COLUMNS[1:]])
        manifest += [(f"fold{fold}.checkpoint", fdir / "checkpoint.txt"),
                     (f"fold{fold}.loss_log", fdir / "loss_log.csv")]
        if cfg.sensitive:
            try:
                rep = evaluate(res.model, val, cfg.sensitive)
                write_report(rep, fdir / "val_report.csv")
                manifest.append((f"fold{fold}.val_report", fdir / "val_report.csv"))
            except UndefinedMetricError as exc:
                log.warning("fold %d validation metrics undefined: %s", fold, exc)
    manifest.append(("timing.train_seconds", f"{time.time() - t0:.3f}"))
    write_kv(out / "manifest.txt", manifest)
    print(f"trained {cfg.folds} folds -> {out}")
    return EXIT_OK


def _checkpoints(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.glob("fold*/checkpoint.txt"), key=lambda p: int(p.parent.name[4:]))
        if not found:
            raise UsageError(f"no fold checkpoints under {path}")
        return found
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return [path]


def _load(path: Path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    paths = _checkpoints(Path(args.checkpoint))
    subjects = _load_cohort(args.cohort, args.sensitive)
    digest = cohort_hash(args.cohort)
    by_id = {s.id: s for s in subjects}
    reports = []
    for path in paths:
        ckpt = _load(path)
        if ckpt.meta.get("cohort_hash", digest) != digest and not args.force:
            raise UsageError(f"{path} was trained on a different cohort (use --force to override)")
        ids = ckpt.meta.get("test_ids") if args.split == "test" else None
        evaluated = [by_id[i] for i in ids if i in by_id] if ids else subjects
        sensitive = args.sensitive or ckpt.config.get("sensitive") or "sex"
        reports.append(evaluate(ckpt.model(), evaluated, sensitive))
    report = reports[0] if len(reports) == 1 else mean_report(reports)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "report.csv" if Path(args.checkpoint).is_dir() \
        else Path(args.checkpoint).with_name("report.csv")
    write_report(report, out)
    write_report(report, out.with_name(out.stem + "_full" + out.suffix), full_precision=True)
    for k in METRIC_NAMES:
        print(f"{k},{report[k]:.6f}")
    return EXIT_OK


def cmd_attmap(args) -> int:
    if args.token not in ATTRIBUTES:
        raise UsageError(f"unknown token {args.token!r}; choose one of {ATTRIBUTES}")
    ckpt = _load(_checkpoints(Path(args.checkpoint))[0])
    subjects = {s.id: s for s in _load_cohort(args.cohort, ckpt.config.get("sensitive"))}
    if args.subject not in subjects:
        raise UsageError(f"unknown subject {args.subject!r}")
    subj = subjects[args.subject]
    model = ckpt.model()
    from .phenotext import ATTR_POS
    a_ttca, a_loc = model.attention_stack(subj.matrix, subj.record)
    amap = activation_map(compose_maps(a_ttca, a_loc), ATTR_POS[args.token])
    out = Path(args.out or f"{args.subject}_{args.token}.{args.format}")
    export_map(amap, out, args.format)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    settings = read_config(args.config)
    settings.update(_flag_settings(args, ("epochs", "lr", "sensitive")))
    subjects = _load_cohort(args.cohort, settings.get("sensitive"))
    cfg = train_config(settings, subjects[0].matrix.shape[0])
    seeds = range(args.seeds)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            parts = list(pool.map(_ablate_seed, [(subjects, cfg, s) for s in seeds]))
        rows = parts[0]
        for other in parts[1:]:
            for row, o in zip(rows, other):
                row.per_seed.extend(o.per_seed)
    else:
        rows = ablation(lambda _: subjects, cfg, seeds)
    table = format_table(rows)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(table)
    for line in table:
        print(",".join(line))
    return EXIT_OK


def _ablate_seed(job):
    subjects, cfg, seed = job
    return ablation(lambda _: subjects, cfg, [seed], ABLATION_GRID)


# entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurolip", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="80/20 split then k-fold training")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sensitive")
    p.add_argument("--attn-loss", choices=["on", "off"])
    p.add_argument("--neg-grad", choices=["on", "off"])
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint or a run directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--sensitive", choices=SENSITIVE_CHOICES)
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attmap", help="export one token's activation map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--format", choices=["csv", "svg"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attmap)

    p = sub.add_parser("ablate", help="attention loss x negative gradient grid")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sensitive")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
