"""
Command line entry point.

    segfusion gen-data  --out DIR [--config FILE] [--seed N]
    segfusion train     --corpus FILE --out DIR [--folds K] [--rung NAME]
    segfusion eval      --corpus FILE --out DIR [--params FILE]
    segfusion ablate    --corpus FILE --out DIR
    segfusion gradcheck [--out DIR]

Exit status: 0 on success, 2 for usage/configuration problems, 1 for
failures during the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RUNGS, RunConfig, dump_config, load_config, parse_config_text
from .corpus import load_corpus, probe_auc, save_corpus, synthetic_corpus
from .errors import ConfigurationError, CorpusError, SegfusionError
from .evaluation import AUC_METHOD, auc_macro_ovr, kfold_cv, run_ablation
from .model import ModelParams, predict_proba
from .training import train

log = logging.getLogger("segfusion")

VERBS = ("gen-data", "train", "eval", "ablate", "gradcheck")


class UsageError(SegfusionError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segfusion", description=__doc__.split("\n\n")[0])
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--corpus", help="corpus path (.jsonl or .npz)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--params", help="saved parameters for eval (default OUT/params.npz)")
    parser.add_argument("--seed", type=int, help="overrides train.seed and data.seed")
    parser.add_argument("--folds", type=int, help="overrides train.folds")
    parser.add_argument("--rung", choices=RUNGS, help="architecture rung")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set train.epochs=5")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        pairs = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value
        cfg = cfg.override(pairs)
    train_cfg = cfg.train
    data = cfg.data
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
        data = replace(data, seed=args.seed)
    if args.folds is not None:
        train_cfg = replace(train_cfg, folds=args.folds)
    if args.rung is not None:
        train_cfg = train_cfg.with_rung(args.rung)
    return RunConfig(train=train_cfg, data=data)


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name} is required for {args.verb}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(args):
    path = Path(args.corpus)
    if not path.is_file():
        raise UsageError(f"corpus not found: {path}")
    return load_corpus(path)


def write_config_echo(out: Path, cfg: RunConfig) -> None:
    (out / "config.resolved").write_text(dump_config(cfg))


def save_params(path: Path, params: ModelParams, cfg: RunConfig, n_classes: int, d_audio: int, d_text: int):
    meta = {"rung": params.rung, "n_classes": n_classes, "d_audio": d_audio, "d_text": d_text}
    np.savez(path, __config__=np.array(dump_config(cfg)), __meta__=np.array(json.dumps(meta)), **params.state())


def load_params(path: Path) -> tuple[ModelParams, RunConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        cfg = parse_config_text(str(data["__config__"]))
        meta = json.loads(str(data["__meta__"]))
        state = {k: data[k] for k in data.files if not k.startswith("__")}
    params = ModelParams.init(cfg.train.model, meta["rung"], meta["d_audio"], meta["d_text"], meta["n_classes"])
    params.load_state(state)
    return params, cfg, meta


def _write_traces(path: Path, reports) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        names = list(reports[0].traces)
        w.writerow(["fold", "epoch", *names])
        for r in reports:
            for epoch in range(len(r.traces["total"])):
                w.writerow([r.fold, epoch, *[r.traces[n][epoch] for n in names]])


def _write_roc(path: Path, probs: np.ndarray, labels: np.ndarray) -> None:
    """One-vs-rest ROC points per class, as plain data."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "threshold", "fpr", "tpr"])
        for c in range(probs.shape[1]):
            pos = labels == c
            if pos.all() or not pos.any():
                continue
            for thr in np.unique(probs[:, c])[::-1]:
                pred = probs[:, c] >= thr
                w.writerow([c, repr(float(thr)), (pred & ~pos).sum() / (~pos).sum(), (pred & pos).sum() / pos.sum()])


def cmd_gen_data(args, cfg: RunConfig) -> int:
    _require(args, "out")
    out = _out_dir(args)
    docs, manifest = synthetic_corpus(cfg.data.validate())
    manifest.probe_auc = probe_auc(docs, manifest.n_classes, "text", seed=cfg.data.seed)
    path = Path(args.corpus) if args.corpus else out / "corpus.jsonl"
    save_corpus(path, docs, manifest)
    write_config_echo(out, cfg)
    print(manifest.to_text())
    print(f"corpus: {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    _require(args, "corpus", "out")
    cfg.train.validate()
    docs, manifest = _corpus(args)
    print(manifest.to_text())
    out = _out_dir(args)
    write_config_echo(out, cfg)
    cv = kfold_cv(docs, cfg.train, manifest.n_classes)
    with (out / "fold_reports.jsonl").open("w") as fh:
        for r in cv.folds:
            fh.write(r.to_json() + "\n")
    (out / "cv_summary.json").write_text(json.dumps(cv.summary(), indent=2))
    _write_traces(out / "loss_traces.csv", cv.folds)
    pooled_labels = np.concatenate([r.val_labels for r in cv.folds]).astype(np.int64)
    _write_roc(out / "roc_points.csv", np.vstack([r.val_probs for r in cv.folds]), pooled_labels)
    for r in cv.folds:
        auc = "n/a" if r.val_auc is None else f"{r.val_auc:.4f}"
        print(f"fold {r.fold}: val AUC {auc}")
    print(f"mean AUC {cv.mean_auc:.4f} +/- {cv.std_auc:.4f} ({AUC_METHOD})")

    final = train(docs, replace(cfg.train, batch_size=min(cfg.train.batch_size, len(docs))), manifest.n_classes)
    save_params(out / "params.npz", final.params, cfg, manifest.n_classes, manifest.d_audio, manifest.d_text)
    print(f"parameters: {out / 'params.npz'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    _require(args, "corpus")
    if args.params is None and args.out is None:
        raise UsageError("eval needs --params or --out")
    params_path = Path(args.params) if args.params else Path(args.out) / "params.npz"
    if not params_path.is_file():
        raise UsageError(f"parameters not found: {params_path}")
    docs, manifest = _corpus(args)
    params, saved_cfg, meta = load_params(params_path)
    if (meta["d_audio"], meta["d_text"]) != (manifest.d_audio, manifest.d_text):
        raise UsageError("corpus embedding widths do not match the saved model")
    probs = predict_proba(params, docs)
    labels = np.array([d.label for d in docs])
    macro, per_class = auc_macro_ovr(probs, labels, meta["n_classes"])
    print(f"{'class':<8}{'AUC':>8}")
    for c, auc in enumerate(per_class):
        print(f"{c:<8}{'n/a' if auc is None else f'{auc:.4f}':>8}")
    print(f"{'macro':<8}{macro:>8.4f}")
    if args.out:
        out = _out_dir(args)
        write_config_echo(out, saved_cfg)
        _write_roc(out / "roc_points.csv", probs, labels)
        with (out / "predictions.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", *[f"p{c}" for c in range(probs.shape[1])]])
            for d, row in zip(docs, probs):
                w.writerow([d.id, d.label, *map(repr, row.tolist())])
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    _require(args, "corpus", "out")
    cfg.train.validate()
    docs, manifest = _corpus(args)
    out = _out_dir(args)
    write_config_echo(out, cfg)
    result = run_ablation(docs, cfg.train, manifest.n_classes, task=manifest.task, progress=log.info)
    (out / "ablation.txt").write_text(result.to_text())
    (out / "ablation.csv").write_text(result.to_csv())
    print(result.to_text())
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_suite

    results = run_suite(cfg.train.loss, seed=cfg.train.seed)
    ok = True
    lines = []
    for name, (err, tol) in results.items():
        passed = err <= tol
        ok &= passed
        lines.append(f"{name:<20} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if passed else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args)
        write_config_echo(out, cfg)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.verb](args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except CorpusError as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return 1
    except SegfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
