"""Command-line interface: ``fibinetpp <command> [flags]``.

Exit status is 0 on success, 1 on a usage error (bad or missing flags) and 2
when the command itself fails (unreadable data, corrupt checkpoint, failed
gradient check, ...). Diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SyntheticSpec, generate_synthetic, ingest, load_oracle, parse_row, sidecar_path
from .errors import ConfigError, FibinetError
from .features import CategoricalField, FeatureSchema, encode, fit_schema
from .gradcheck import run_suite
from .models import (Arch, ModelHyper, build, closed_form_fibinet, closed_form_fibinetpp,
                     count_params, predict, validate)
from .training import auc, evaluate, split_dataset, train_lr_grid

CRITEO_NUMERICAL, CRITEO_CATEGORICAL = 13, 26


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _list_of(kind, name):
    def parse(text: str):
        try:
            values = [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {name}, got {text!r}")
        if not values:
            raise argparse.ArgumentTypeError(f"expected at least one {name}")
        return tuple(values)
    parse.__name__ = name
    return parse


_ints = _list_of(int, "integers")
_floats = _list_of(float, "numbers")


def _add_model_flags(p, defaults: bool):
    d = RunConfig() if defaults else None
    pick = (lambda name: getattr(d, name)) if defaults else (lambda name: None)
    p.add_argument("--arch", choices=[a.value for a in Arch], default=pick("arch"),
                   help="model architecture (default: fibinetpp)")
    p.add_argument("-d", "--embedding-size", dest="d", type=int, default=pick("d"),
                   help="embedding size d (default: 10)")
    p.add_argument("--mlp", type=_ints, default=pick("mlp"),
                   help="hidden widths, comma separated (default: 400,400,400)")
    p.add_argument("-m", "--compression", dest="m", type=int, default=pick("m"),
                   help="compression size m of bi-linear+ (default: 50)")
    p.add_argument("-g", "--groups", dest="g", type=int, default=pick("g"),
                   help="SENet+ group number g (default: 2)")
    p.add_argument("-r", "--reduction", dest="r", type=float, default=pick("r"),
                   help="excitation reduction ratio r (default: 3)")
    p.add_argument("--field-type", choices=["field_all", "field_each", "field_interaction"],
                   default=pick("field_type"), help="bi-linear weight sharing (default: field_interaction)")


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    _add_model_flags(p, defaults=False)
    p.add_argument("--data", help="TSV file; split 8:1:1 unless --val is given")
    p.add_argument("--val", help="validation TSV (disables the automatic split)")
    p.add_argument("--test", help="test TSV (used with --val)")
    p.add_argument("--lr", type=float, help="single learning rate (default: try the grid)")
    p.add_argument("--lr-grid", type=_floats, help="learning rates to try (default: 1e-4,1e-3)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default: 1024)")
    p.add_argument("--epochs", type=int, help="maximum epochs (default: 20)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs (default: 3)")
    p.add_argument("--seed", type=int, help="seed for split, init and shuffling (default: 0)")
    p.add_argument("--min-freq", type=int, help="tokens rarer than this map to the OOV row (default: 1)")
    p.add_argument("--num-numerical", type=int, help="numerical columns in the TSV")
    p.add_argument("--num-categorical", type=int, help="categorical columns in the TSV")
    p.add_argument("--max-bad-fraction", type=float,
                   help="tolerated fraction of malformed rows (default: 0.001)")
    p.add_argument("--lazy-adam", action="store_const", const=True, default=None,
                   help="update only the embedding rows seen in each batch")
    p.add_argument("--no-wall-time", dest="wall_time", action="store_const", const=False,
                   default=None, help="write wall_ms=0 so metric streams are reproducible bit for bit")
    p.add_argument("--metrics", help="JSON-lines metrics file, '-' for stdout "
                                     "(default: <out>.metrics.jsonl)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibinetpp", description="FiBiNet++ CTR models: train, evaluate, audit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model and write a checkpoint plus metrics")
    _add_run_flags(p)
    p.add_argument("--out", help="checkpoint path stem; writes <out>.json and <out>.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AUC and log loss of a checkpoint on a labelled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-bad-fraction", type=float, default=0.001)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="click probabilities for every row of a TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--unlabeled", action="store_true", help="rows have no label column")
    p.add_argument("--output", help="write scores here instead of stdout")
    p.add_argument("--max-bad-fraction", type=float, default=0.001)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count-params", help="parameter audit with the closed-form totals")
    _add_model_flags(p, defaults=True)
    p.add_argument("-f", "--fields", dest="f", type=int, default=50, help="number of fields (default: 50)")
    p.add_argument("-t", "--features", dest="t", type=int, default=1_000_000,
                   help="total feature count t (default: 1000000)")
    p.add_argument("--json", action="store_true", help="print one JSON object")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="central-difference check of every layer and graph")
    _add_model_flags(p, defaults=False)
    p.add_argument("-f", "--fields", dest="f", type=int, default=4)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..N-1 (default: 5)")
    p.add_argument("--batch", type=int, default=6, help="rows per check (default: 6)")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck, d=4, mlp=(8, 8), m=5, g=2, r=3.0,
                   field_type="field_interaction")

    p = sub.add_parser("gen-synthetic", help="write a planted-interaction dataset and its oracle")
    p.add_argument("--out", required=True, help="TSV path; the oracle goes to <out>.meta.json")
    s = SyntheticSpec()
    p.add_argument("--rows", type=int, default=s.n_rows)
    p.add_argument("--seed", type=int, default=s.seed)
    p.add_argument("--f-cat", type=int, default=s.f_cat)
    p.add_argument("--f-num", type=int, default=s.f_num)
    p.add_argument("--vocab", type=int, default=s.vocab_size)
    p.add_argument("--pairs", default="adjacent",
                   help="'adjacent', 'all', or explicit field pairs like 2-3,4-5 (default: adjacent)")
    p.add_argument("--interaction-weight", type=float, default=s.interaction_weight)
    p.add_argument("--linear-scale", type=float, default=s.linear_scale)
    p.add_argument("--intercept", type=float, default=s.intercept)
    p.add_argument("--noise", type=float, default=s.noise, help="logit divisor; 'inf' for pure noise")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("sweep", help="vary one of g, r, m and report validation AUC per value")
    _add_run_flags(p)
    p.add_argument("--param", required=True, choices=["g", "r", "m"])
    p.add_argument("--values", required=True, type=_floats)
    p.set_defaults(func=cmd_sweep)
    return parser


# -- helpers -----------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    names = [f for f in RunConfig.__dataclass_fields__ if f not in ("lr_grid",)]
    overrides = {n: getattr(args, n) for n in names if hasattr(args, n)}
    overrides["lr_grid"] = args.lr_grid
    cfg = cfg.override(**overrides)
    if not cfg.data:
        raise UsageError("--data is required (or set \"data\" in the config file)")
    if cfg.test and not cfg.val:
        raise UsageError("--test needs --val as well")
    return cfg.validate()


def _layout(cfg: RunConfig) -> FeatureSchema:
    """Unfitted schema describing the TSV columns."""
    n_num, n_cat = cfg.num_numerical, cfg.num_categorical
    if n_num is None and n_cat is None and sidecar_path(cfg.data).exists():
        return load_oracle(cfg.data).schema
    n_num = CRITEO_NUMERICAL if n_num is None else n_num
    n_cat = CRITEO_CATEGORICAL if n_cat is None else n_cat
    return FeatureSchema.criteo_like(n_num, n_cat, 1)


def _read(path, schema, max_bad_fraction):
    reader = ingest(path, schema, max_bad_fraction)
    rows = list(reader)
    if reader.skipped:
        line, why = reader.first_bad
        print(f"fibinetpp: {path}: skipped {reader.skipped} of {reader.rows_read} malformed rows "
              f"(first at line {line}: {why})", file=sys.stderr)
    if not rows:
        raise ConfigError(f"{path}: no usable rows")
    return rows


def _prepare(cfg: RunConfig):
    layout = _layout(cfg)
    rows = _read(cfg.data, layout, cfg.max_bad_fraction)
    if cfg.val:
        train_rows = rows
        val_rows = _read(cfg.val, layout, cfg.max_bad_fraction)
        test_rows = _read(cfg.test, layout, cfg.max_bad_fraction) if cfg.test else []
    else:
        train_rows, val_rows, test_rows = split_dataset(rows, cfg.seed)
    schema = fit_schema(train_rows, layout, min_freq=cfg.min_freq)
    return schema, encode(train_rows, schema), encode(val_rows, schema), \
        (encode(test_rows, schema) if test_rows else None)


@contextlib.contextmanager
def _metrics_stream(path):
    if path is None:
        yield None
    elif path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _fit(cfg: RunConfig, schema, train_data, val_data, metrics):
    hyper = cfg.hyper()
    make = lambda: build(cfg.arch, schema, hyper, seed=cfg.seed)  # noqa: E731
    return train_lr_grid(make, train_data, val_data, cfg.train_config(cfg.learning_rates()[0]),
                         cfg.learning_rates(), metrics)


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = cfg.out
    metrics_path = cfg.metrics if cfg.metrics is not None else f"{out}.metrics.jsonl"
    schema, tr, va, te = _prepare(cfg)
    with _metrics_stream(metrics_path) as metrics:
        result, lr = _fit(cfg, schema, tr, va, metrics)
    summary = {"lr": lr, "best_epoch": result.best_epoch, "epochs_run": len(result.history),
               "val_auc": result.best_val.auc, "val_logloss": result.best_val.logloss}
    if te is not None and len(te):
        report = evaluate(result.model, te)
        summary.update(test_auc=report.auc, test_logloss=report.logloss)
    manifest, blob = save_checkpoint(result.model, out, extra=summary)
    summary["checkpoint"] = str(manifest)
    print(json.dumps(summary), file=sys.stderr if metrics_path == "-" else sys.stdout)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = _read(args.data, model.schema, args.max_bad_fraction)
    report = evaluate(model, encode(rows, model.schema))
    print(json.dumps({"auc": report.auc, "logloss": report.logloss, "n": report.n}))
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    schema = model.schema
    if args.unlabeled:
        rows = []
        with open(args.data, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if line:
                    try:
                        rows.append(parse_row("0\t" + line, schema))
                    except FibinetError as exc:
                        raise ConfigError(f"{args.data}: line {lineno}: {exc}") from None
    else:
        rows = _read(args.data, schema, args.max_bad_fraction)
    scores = predict(model, encode(rows, schema))
    text = "".join(f"{s!r}\n" for s in scores.tolist())
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _audit_schema(f: int, t: int) -> FeatureSchema:
    """``f`` categorical fields whose rows (OOV included) sum to ``t``."""
    if f < 2:
        raise UsageError(f"-f must be at least 2, got {f}")
    if t < 2 * f:
        raise UsageError(f"-t must be at least 2*f={2 * f} (one value plus OOV per field), got {t}")
    base, extra = divmod(t, f)
    return FeatureSchema(tuple(CategoricalField(f"C{i + 1}", base + (i < extra) - 1)
                               for i in range(f)))


def cmd_count_params(args) -> int:
    hyper = ModelHyper(d=args.d, mlp=args.mlp, m=args.m, g=args.g, r=args.r,
                       field_type=args.field_type)
    schema = _audit_schema(args.f, args.t)
    model = build(args.arch, schema, hyper, init=False)
    audit = count_params(model)
    f, d, h, m, t = args.f, args.d, args.mlp[0], args.m, args.t
    fibinet = closed_form_fibinet(f, d, h, t)
    fibinetpp = closed_form_fibinetpp(f, d, h, m)
    row = {"arch": args.arch, "f": f, "d": d, "h": h, "m": m, "t": t,
           "components": audit.components,
           "non_embedding_total": audit.non_embedding_total,
           "embedding_total": audit.embedding_total,
           "closed_form_fibinet": fibinet,
           "closed_form_fibinetpp": fibinetpp,
           "ratio": round(fibinet / fibinetpp, 1)}
    if args.arch == Arch.FIBINETPP.value:
        row["three_part_registry"] = audit.three_part
    elif args.arch == Arch.FIBINET.value:
        row["two_part_registry"] = audit.two_part
    if args.json:
        print(json.dumps(row))
        return 0
    print(f"arch {args.arch}  f={f} d={d} h={h} m={m} t={t}")
    print("component             parameters")
    for name, count in audit.components.items():
        print(f"  {name:<20}{count:>12,}")
    print(f"  {'non_embedding_total':<20}{audit.non_embedding_total:>12,}")
    print(f"  {'embedding_total':<20}{audit.embedding_total:>12,}")
    if "three_part_registry" in row:
        print(f"three-part total (registry): {row['three_part_registry']:,}")
    if "two_part_registry" in row:
        print(f"two-part total (registry): {row['two_part_registry']:,}")
    print(f"closed form FiBiNet    f(f-1)dh + t        = {fibinet:,}")
    print(f"closed form FiBiNet++  fdh + mh + f(f-1)/2 m = {fibinetpp:,}")
    print(f"compression ratio: {fibinet / fibinetpp:.1f}x")
    return 0


def cmd_gradcheck(args) -> int:
    hyper = ModelHyper(d=args.d, mlp=args.mlp, m=args.m, g=args.g, r=args.r,
                       field_type=args.field_type)
    archs = [a.value for a in Arch] if args.arch is None else [args.arch]
    for arch in archs:
        validate(Arch(arch), hyper)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    worst = run_suite(args.f, args.d, hyper, range(args.seeds), args.epsilon, args.batch,
                      skip=[f"graph:{a.value}" for a in Arch if a.value not in archs])
    failed = False
    for name, err in worst.items():
        ok = err <= args.tolerance
        failed |= not ok
        print(f"{name:<20} {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"max relative error {max(worst.values()):.3e} (tolerance {args.tolerance:g})")
    return 2 if failed else 0


def _parse_pairs(text: str):
    if text == "adjacent":
        return None
    if text == "all":
        return "all"
    pairs = []
    for item in text.split(","):
        try:
            i, j = (int(v) for v in item.split("-"))
        except ValueError:
            raise UsageError(f"--pairs: cannot parse {item!r}; expected i-j") from None
        pairs.append((i, j))
    return pairs


def cmd_gen_synthetic(args) -> int:
    if args.rows < 1:
        raise UsageError("--rows must be positive")
    spec = SyntheticSpec(f_cat=args.f_cat, f_num=args.f_num, vocab_size=args.vocab,
                         n_rows=args.rows, seed=args.seed, interaction_weight=args.interaction_weight,
                         linear_scale=args.linear_scale, intercept=args.intercept, noise=args.noise)
    spec.pairs = _parse_pairs(args.pairs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    rows, oracle = generate_synthetic(spec, args.out)
    labels = np.array([r.label for r in rows], dtype=np.float64)
    summary = {"rows": len(rows), "positive_rate": float(labels.mean()), "path": args.out,
               "sidecar": str(sidecar_path(args.out))}
    if 0 < labels.sum() < len(labels):
        summary["oracle_auc"] = auc(labels, oracle.score_rows(rows))
    print(json.dumps(summary))
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    schema, tr, va, _ = _prepare(cfg)
    print("param\tvalue\tval_auc\tval_logloss\tbest_epoch\tlr")
    with _metrics_stream(cfg.metrics) as metrics:
        for value in args.values:
            if args.param in ("g", "m"):
                if not float(value).is_integer():
                    raise UsageError(f"--values: {args.param} must be an integer, got {value}")
                value = int(value)
            run = cfg.override(**{args.param: value}).validate()
            result, lr = _fit(run, schema, tr, va, metrics)
            print(f"{args.param}\t{value}\t{result.best_val.auc:.6f}\t{result.best_val.logloss:.6f}"
                  f"\t{result.best_epoch}\t{lr:g}", flush=True)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fibinetpp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (FibinetError, OSError) as exc:
        print(f"fibinetpp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
