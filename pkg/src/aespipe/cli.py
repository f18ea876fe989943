"""Command line: ``aespipe <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines naming
the same options (dashes or underscores); explicit flags take precedence.
Exit status is 0 on success, 1 on usage errors, 2 on data or format errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataio, plotting, synth
from .dataio import StackedModel, load_dataset, load_metrics, load_model, read_manifest, save_model
from .ensemble import PredictionTable, fit_ensemble, stack_predict
from .errors import AesError, ConfigError, DataError
from .evalmetrics import full_report
from .gbtfuse import DEFAULT_SPACE, INT_FIELDS, CvEnsemble, FusionModel, GbtHyperparams, cv_train, hp_search
from .ipl import IplConfig, ipl_run, pseudo_label
from .predictor import AXES, AesPredictor, AesScores, TrainConfig, clamp, init_predictor, predict_pooled, train

log = logging.getLogger("aespipe")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
LIST_OPTIONS = {"kan", "space"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers

def _ints(text):
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _order(text):
    vals = _ints(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("order must be 'm,n'")
    return vals


def _records(manifest, split=None, labeled=None):
    recs = read_manifest(manifest)
    out = []
    for r in recs:
        if split is not None and r.split != split:
            continue
        if labeled is not None and (r.labels is not None) != labeled:
            continue
        out.append(r)
    return out


def _base(manifest):
    return Path(manifest).resolve().parent


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(args, out: Path):
    lines = []
    for key in sorted(vars(args)):
        if key in ("func",):
            continue
        val = getattr(args, key)
        if isinstance(val, (list, tuple)):
            val = " ".join(str(v) for v in val)
        lines.append(f"{key}={val}")
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_cfg(args, seed=None) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed if seed is None else seed,
        activation_lr_scale=args.activation_lr_scale,
    )


def _load_kind(path, kind):
    model = load_model(path)
    ok = {"kan": AesPredictor, "fusion": FusionModel, "ensemble": StackedModel}[kind]
    if not isinstance(model, ok):
        raise ConfigError(f"{path} is not a {kind} model")
    return model


def _predict_records(model, records, base):
    """Clamped (N, 4) predictions for any model kind."""
    if isinstance(model, AesPredictor):
        return predict_pooled(model, load_dataset(records, base).pooled)
    if isinstance(model, FusionModel):
        names, X = load_metrics(records, base)
        if names != model.feature_names:
            raise DataError("metric columns do not match the fusion model's features")
        return clamp(model.predict(X))
    if isinstance(model, StackedModel):
        member = [_predict_records(m, records, base) for m in model.members]
        ids = [r.utt_id for r in records]
        out = np.empty((len(records), len(AXES)))
        for a in range(len(AXES)):
            table = PredictionTable(np.stack([p[:, a] for p in member], axis=1),
                                    np.zeros(len(records)), ids)
            out[:, a] = stack_predict(table, model.weights.weights[a])
        return out
    raise ConfigError(f"cannot predict with {type(model).__name__}")


def _write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "dev_loss"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.dev_loss)])


# -------------------------------------------------------------- subcommands

def cmd_gen_synth(args):
    out = _out_dir(args)
    synth.gen_synthetic(args.n_train, args.n_dev, args.n_eval, args.n_systems, args.layers,
                        args.frames, args.dims, args.seed, out, n_unlabeled=args.n_unlabeled)
    _write_config(args, out)
    print(out / synth.MANIFEST_NAME)


def cmd_train_kan(args):
    base = _base(args.manifest)
    train_set = load_dataset(_records(args.manifest, args.train_split, labeled=True), base)
    dev_set = load_dataset(_records(args.manifest, args.dev_split, labeled=True), base)
    if len(train_set) == 0:
        raise DataError(f"no labeled {args.train_split!r} records in {args.manifest}")
    if args.init:
        model = _load_kind(args.init, "kan")
    else:
        _, L, D = train_set.pooled.shape
        model = init_predictor(L, D, args.hidden, args.groups, args.order, args.seed)
    model, history = train(model, train_set, dev_set, _train_cfg(args))
    out = _out_dir(args)
    save_model(model, out / "model.aesm")
    _write_history(history, out / "history.csv")
    if not args.no_figures:
        plotting.plot_history(history, out / "history.png")
    _write_config(args, out)


def _relocate(rec, base: Path, out: Path):
    """Copy of ``rec`` with relative paths rewritten to resolve from ``out``."""
    rec = dataio.ManifestRecord(**{f.name: getattr(rec, f.name) for f in fields(rec)})
    rec.extra = dict(rec.extra)
    for attr in ("feature_path", "metrics_path"):
        p = getattr(rec, attr)
        if p and not Path(p).is_absolute():
            setattr(rec, attr, os.path.relpath(base / p, out.resolve()))
    return rec


def cmd_pseudo_label(args):
    teacher = _load_kind(args.teacher, "kan")
    base = _base(args.manifest)
    records = read_manifest(args.manifest)
    pool = [r for r in records if r.split == args.split and r.labels is None]
    ds = pseudo_label(teacher, load_dataset(pool, base))
    labels = dict(zip(ds.ids, ds.labels))
    out = _out_dir(args)
    new = []
    for r in records:
        r = _relocate(r, base, out)
        if r.utt_id in labels:
            r.labels = AesScores.from_array(labels[r.utt_id])
            r.pseudo = True
        new.append(r)
    dataio.write_manifest(new, out / "manifest.jsonl")
    _write_config(args, out)


def cmd_ipl(args):
    base = _base(args.manifest)
    teacher = _load_kind(args.teacher, "kan")
    labeled = load_dataset(_records(args.manifest, args.train_split, labeled=True), base)
    unlabeled = load_dataset(_records(args.manifest, args.train_split, labeled=False), base)
    dev = load_dataset(_records(args.manifest, args.dev_split, labeled=True), base)
    cfg = IplConfig(args.max_updates, _train_cfg(args), args.seed)
    model, ipl_log = ipl_run(teacher, labeled, unlabeled, dev, cfg)
    out = _out_dir(args)
    save_model(model, out / "model.aesm")
    with open(out / "ipl_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "student_dev_loss", "teacher_dev_loss", "accepted"])
        for r in ipl_log:
            w.writerow([r.iteration, repr(r.student_dev_loss), repr(r.teacher_dev_loss),
                        int(r.accepted)])
    if not args.no_figures:
        plotting.plot_ipl(ipl_log, out / "ipl_log.png")
    _write_config(args, out)


def _parse_space(items):
    space = dict(DEFAULT_SPACE)
    for item in items or []:
        key, _, rng = item.partition("=")
        key = key.strip().replace("-", "_")
        if key not in space:
            raise ConfigError(f"unknown search dimension {key!r}")
        if "|" in rng:
            conv = int if key in INT_FIELDS else float
            space[key] = [conv(v) for v in rng.split("|") if v]
            continue
        lo, sep, hi = rng.partition(":")
        if not sep:
            lo = hi = rng
        try:
            space[key] = (float(lo), float(hi))
        except ValueError:
            raise ConfigError(f"bad range {item!r}") from None
    return space


def cmd_train_gbt(args):
    base = _base(args.manifest)
    recs = _records(args.manifest, args.train_split, labeled=True)
    recs = [r for r in recs if not r.pseudo]
    names, X = load_metrics(recs, base)
    Y = np.stack([r.labels.as_array() for r in recs]) if recs else np.zeros((0, 4))
    fixed = GbtHyperparams(args.rounds, args.max_depth, args.gbt_lr, args.min_samples_leaf,
                           args.l2_leaf_reg, args.subsample)
    space = _parse_space(args.space)
    axes, hps, trace_rows = [], [], []
    for a, axis in enumerate(AXES):
        if args.trials > 0:
            hp, _, trace = hp_search(X, Y[:, a], space, args.trials, args.folds, args.seed + a,
                                     base=fixed)
            for t, (thp, mse) in enumerate(trace):
                trace_rows.append([axis, t, *[getattr(thp, f.name) for f in fields(thp)], mse])
        else:
            hp = fixed
        cv = cv_train(X, Y[:, a], hp, args.folds, args.seed + a)
        trace_rows.append([axis, "final", *[getattr(hp, f.name) for f in fields(hp)],
                           cv.mean_cv_mse])
        axes.append(cv)
        hps.append(hp)
    out = _out_dir(args)
    save_model(FusionModel(names, axes, hps), out / "fusion.aesm")
    with open(out / "cv.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "trial", *[f.name for f in fields(GbtHyperparams)], "cv_mse"])
        for row in trace_rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _write_config(args, out)


def cmd_fit_ensemble(args):
    base = _base(args.manifest)
    recs = _records(args.manifest, args.split, labeled=True)
    members = [_load_kind(p, "kan") for p in args.kan]
    names = list(args.kan)
    if args.fusion:
        members.append(_load_kind(args.fusion, "fusion"))
        names.append(args.fusion)
    if not members:
        raise ConfigError("no ensemble members given")
    preds = [_predict_records(m, recs, base) for m in members]
    truth = np.stack([r.labels.as_array() for r in recs])
    ids = [r.utt_id for r in recs]
    tables = [PredictionTable(np.stack([p[:, a] for p in preds], axis=1), truth[:, a], ids)
              for a in range(len(AXES))]
    weights, scores = fit_ensemble(tables, args.step, args.objective)
    out = _out_dir(args)
    save_model(StackedModel(members, names, weights), out / "ensemble.aesm")
    with open(out / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", *names, args.objective])
        for a, axis in enumerate(AXES):
            w.writerow([axis, *(repr(float(v)) for v in weights.weights[a]), repr(scores[a])])
    _write_config(args, out)


def cmd_predict(args):
    model = load_model(args.model)
    recs = _records(args.manifest, args.split)
    preds = _predict_records(model, recs, _base(args.manifest))
    out = _out_dir(args)
    dataio.write_predictions({r.utt_id: p for r, p in zip(recs, preds)}, out / "predictions.csv")
    _write_config(args, out)


def cmd_evaluate(args):
    preds = dataio.read_predictions(args.pred)
    recs = [r for r in _records(args.manifest, args.split, labeled=True) if not r.pseudo]
    if args.split is None:
        recs = [r for r in recs if r.utt_id in preds]
    if not recs:
        raise DataError("no labeled manifest records match the predictions")
    labels = {r.utt_id: r.labels for r in recs}
    chosen = {u: preds[u] for u in labels if u in preds}
    report = full_report(chosen, labels, {r.utt_id: r.system_id for r in recs})
    text = report.to_csv(args.name)
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        (out / "report.csv").write_text(text, encoding="utf-8")
        if not args.no_figures:
            plotting.plot_report(report, out / "report.png", title=args.name)
        _write_config(args, out)


# ------------------------------------------------------------------ parser

def _add_train_flags(p, lr=1e-4):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=40)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--activation-lr-scale", type=float, default=0.01)
    p.add_argument("--train-split", default="train")
    p.add_argument("--dev-split", default="dev")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aespipe", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "write a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-unlabeled", type=int, default=None)
    p.add_argument("--n-dev", type=int, default=100)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--n-systems", type=int, default=10)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--dims", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)

    p = add("train-kan", cmd_train_kan, "train a GR-KAN aesthetics predictor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--hidden", type=_ints, default=(64,))
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--order", type=_order, default=(5, 4))
    p.add_argument("--init", help="start from this model file instead of a fresh init")
    p.add_argument("--no-figures", action="store_true")
    _add_train_flags(p)

    p = add("ipl", cmd_ipl, "iterative pseudo-labeling from a teacher model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--max-updates", type=int, default=5)
    p.add_argument("--no-figures", action="store_true")
    _add_train_flags(p)

    p = add("pseudo-label", cmd_pseudo_label, "label unlabeled records with a teacher")
    p.add_argument("--manifest", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")

    p = add("train-gbt", cmd_train_gbt, "train the metric-fusion boosters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-split", default="train")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--trials", type=int, default=20, help="random-search trials; 0 uses the fixed flags")
    p.add_argument("--space", action="append", help="name=lo:hi or name=a|b|c; repeatable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--gbt-lr", type=float, default=0.1)
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--l2-leaf-reg", type=float, default=1.0)
    p.add_argument("--subsample", type=float, default=1.0)

    p = add("fit-ensemble", cmd_fit_ensemble, "grid-search stacking weights")
    p.add_argument("--kan", nargs="+", default=[], help="KAN model files (4 by default)")
    p.add_argument("--fusion", help="fusion model file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--objective", choices=("mse", "srcc"), default="mse")
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "write predictions for a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score predictions against manifest labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--name", default="model")
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", action="store_true")
    return parser


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values installed as defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if known.config and command:
        sub = subs[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, val in read_config_file(known.config).items():
            if key not in actions or key in ("config", "help", "func"):
                raise ConfigError(f"unknown config key {key!r} for {command}")
            act = actions[key]
            if isinstance(act, argparse._StoreTrueAction):
                defaults[key] = val.lower() in ("1", "true", "yes", "on")
            elif key in LIST_OPTIONS:
                defaults[key] = val.split()
            else:
                try:
                    defaults[key] = act.type(val) if act.type else val
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"config key {key!r}: {exc}") from None
            act.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"aespipe: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AesError, OSError) as exc:
        print(f"aespipe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())
