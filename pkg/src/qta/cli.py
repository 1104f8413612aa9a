"""Command-line entry point: ``qta {gen-data,train,eval,check,norms}``.

Exit codes: 0 success, 1 usage, 2 data or config problem, 3 failed check,
4 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .checks import SUITES, run_suite
from .data import (
    DataError,
    SyntheticConfig,
    atomic_write_text,
    gen_absurd_bias,
    gen_routing,
    load_dataset,
    load_meta,
    write_generated,
)
from .encoders import Vocab
from .fusion import QuestionTypeSet
from .metrics import confusion, evaluate, norm_report
from .models import ModelSpec, TrainConfig, TrainingDiverged, build_model, predict, train

EXIT_USAGE, EXIT_DATA, EXIT_CHECK, EXIT_DIVERGED = 1, 2, 3, 4

log = logging.getLogger("qta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _section(cls, doc: dict, name: str):
    raw = doc.get(name, {}) or {}
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as err:
        raise DataError(f"config section {name!r}: {err}") from err


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing config {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{p}: {err}") from err
    if not isinstance(doc, dict):
        raise DataError(f"{p}: config must be a JSON object")
    return doc


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    doc = read_config(args.config)
    cfg = _section(SyntheticConfig, doc, "synthetic")
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        cfg.validate()
    except ValueError as err:
        raise DataError(str(err)) from err
    train_set, test_set = gen_absurd_bias(cfg) if cfg.rho > 0 else gen_routing(cfg)
    out = Path(args.out)
    write_generated(train_set, test_set, cfg, out)
    resolved = dict(doc, synthetic=cfg.to_dict())
    atomic_write_text(out / "config.json", _dump(resolved))
    print(f"wrote {len(train_set)} train / {len(test_set)} test samples to {out}")
    return 0


def _dataset_labels(data_dir: Path, train_set) -> tuple[list[str], list[str], dict]:
    try:
        meta = load_meta(data_dir)
    except DataError:
        meta = {}
    types = meta.get("question_types") or list(dict.fromkeys(s.question_type for s in train_set.samples))
    answers = meta.get("answers") or list(dict.fromkeys(s.answer for s in train_set.samples))
    return types, answers, meta.get("sources", {})


def cmd_train(args) -> int:
    doc = read_config(args.config)
    spec = _section(ModelSpec, doc, "model")
    tcfg = _section(TrainConfig, doc, "train")
    for name in ("epochs", "lr", "seed", "batch_size"):
        value = getattr(args, name)
        if value is not None:
            setattr(tcfg, name, value)
    if args.seed is not None:
        spec.seed = args.seed
    if args.architecture is not None:
        spec.architecture = args.architecture
    data_dir = Path(args.data)
    train_set = load_dataset(data_dir, "train")
    types, answers, sources = _dataset_labels(data_dir, train_set)
    if "source_shapes" not in doc.get("model", {}) and sources:
        spec.source_shapes = {k: list(v) for k, v in sources.items()}
        spec.sources = list(sources)
    try:
        spec.validate()
        model = build_model(spec, Vocab.build(s.question for s in train_set.samples), QuestionTypeSet(tuple(types)), answers)
        result = train(model, train_set, tcfg)
    except (ValueError, KeyError) as err:
        raise DataError(str(err)) from err
    out = Path(args.out)
    save_checkpoint(model, out / "model.qtac", {"train": tcfg.to_dict()})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for epoch, value in enumerate(result.loss_curve):
        w.writerow([epoch, repr(value)])
    atomic_write_text(out / "loss_curve.csv", buf.getvalue())
    resolved = dict(doc, model=spec.to_dict(), train=tcfg.to_dict(), paths={"data": str(data_dir)})
    atomic_write_text(out / "config.json", _dump(resolved))
    print(f"trained {spec.architecture} for {len(result.loss_curve)} epochs, final loss {result.loss_curve[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(Path(args.data), args.split)
    try:
        data = model.encode(dataset)
    except (ValueError, KeyError) as err:
        raise DataError(str(err)) from err
    pred = predict(model, data)
    answers = [model.answers[i] for i in pred.answer_ids]
    report = evaluate(
        answers,
        [s.answer for s in dataset.samples],
        [s.question_type for s in dataset.samples],
        model.types.names,
    )
    path = Path(args.report)
    atomic_write_text(path, report.to_json())
    if pred.type_ids is not None:
        cm = confusion(pred.type_ids, data.type_ids, len(model.types), model.types.names)
        atomic_write_text(path.with_suffix(".confusion.json"), cm.to_json())
    print(
        f"overall {report.overall_acc:.2f}  arithmetic MPT {report.arithmetic_mpt:.2f}  "
        f"harmonic MPT {report.harmonic_mpt:.2f}"
    )
    return 0


def cmd_check(args) -> int:
    results = run_suite(args.suite, trials=args.trials, eps=args.eps)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else EXIT_CHECK


def cmd_norms(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(Path(args.data), args.split)
    try:
        report = norm_report(model, dataset)
    except (ValueError, KeyError) as err:
        raise DataError(str(err)) from err
    atomic_write_text(Path(args.out), report.to_csv())
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qta", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (default: $QTA_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic routing dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--architecture")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run a numerical verification suite")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--trials", type=int)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("norms", help="gate norm diagnostic as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_norms)
    return parser


def _thread_count(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("QTA_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"QTA_THREADS must be an integer, got {env!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _thread_count(args.threads)
        if threads < 1:
            raise UsageError("--threads must be at least 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as err:
        print(f"qta: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as err:
        print(f"qta: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as err:
        print(f"qta: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
