"""Command-line entry points.

    trasa preprocess --input events.csv --out data/
    trasa train --data data/ --out model.ckpt [--config train.cfg] [--set key=value ...]
    trasa eval --checkpoint model.ckpt --instances data/test.txt [--k 20 --k 10]
    trasa recommend --checkpoint model.ckpt --session 3,7,3,9 [--k 20]
    trasa gradcheck [--quick]
    trasa synthesize --kind markov|long_range --out events.csv [...]

Config files hold ``key = value`` lines (``#`` comments allowed) naming
:class:`trasa.train.TrainConfig` fields; ``--set`` overrides them.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as D
from .gradcheck import run_gradcheck
from .model import TrasaModel
from .train import TrainConfig, evaluate, train

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


def _parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None) -> TrainConfig:
    values = D.read_key_values(path) if path else {}
    values.update(overrides or {})
    return TrainConfig.from_mapping(values)


# -- subcommands -------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    report = D.IngestReport()
    header = None if args.header == "auto" else args.header == "yes"
    sessions = D.ingest(
        args.input, delimiter=args.delimiter, session_col=args.session_col,
        item_col=args.item_col, time_col=args.time_col, header=header, report=report,
    )
    sessions = D.filter_sessions(sessions, args.min_support)
    ds = D.split(sessions, args.test_fraction, args.valid_fraction, args.seed)
    D.save_dataset(ds, args.out)
    print(f"rows={report.rows}")
    print(f"malformed_rows={report.malformed}")
    print(Path(args.out, "stats.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, _parse_overrides(args.set))
    root = Path(args.data)
    vocab = D.read_vocab(root / "vocab.txt")
    train_inst = D.read_instances(root / "train.txt")
    valid = D.read_instances(root / "valid.txt") if (root / "valid.txt").exists() else []
    result = train(train_inst, config, len(vocab), valid, log_path=args.log)
    result.model.save(args.out, {"vocab": vocab, "train_config": asdict(config), "best_epoch": result.best_epoch})
    for rec in result.log:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
    print(f"best_epoch={result.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    model, _ = TrasaModel.load(args.checkpoint)
    instances = D.read_instances(args.instances)
    report = evaluate(model, instances, tuple(args.k or [20]))
    print(report.to_text(timing=not args.no_timing))
    return 0


def cmd_recommend(args) -> int:
    model, meta = TrasaModel.load(args.checkpoint)
    vocab = meta.get("vocab")
    tokens = [t.strip() for t in args.session.split(",") if t.strip()]
    if not tokens:
        raise UsageError("empty session")
    if vocab:
        index = {v: i for i, v in enumerate(vocab)}
        missing = [t for t in tokens if t not in index]
        if missing:
            raise UsageError(f"items not in the checkpoint vocabulary: {','.join(missing)}")
        session = [index[t] for t in tokens]
    else:
        session = [int(t) for t in tokens]
    probs = model.predict_proba([model.structure(session)])[0]
    order = np.lexsort((np.arange(len(probs)), -probs))[: args.k]
    for i in order:
        label = vocab[i] if vocab else str(i)
        print(f"{label} {probs[i]:.8g}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, variants=["full"] if args.quick else None)
    print(report.to_text())
    ok = report.max_error < GRADCHECK_TOLERANCE
    print(f"status={'pass' if ok else 'fail'}")
    return 0 if ok else 1


def cmd_synthesize(args) -> int:
    if args.kind == "markov":
        sessions = D.synthesize_markov(
            args.n_items, args.n_sessions, args.min_len, args.max_len, args.concentration, args.seed
        )
    else:
        sessions = D.synthesize_long_range(
            args.n_items, args.n_sessions, args.gap, args.min_len, args.max_len, seed=args.seed
        )
    if args.format == "events":
        D.write_event_log(sessions, args.out)
    else:
        if args.kind == "long_range":
            instances = D.final_item_instances(sessions)
        else:
            instances = [i for s in sessions for i in D.augment(s)]
        D.write_instances(instances, args.out)
    print(f"sessions={len(sessions)}")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trasa", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw event log -> processed instance files")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--session-col", default="session_id")
    p.add_argument("--item-col", default="item_id")
    p.add_argument("--time-col", default="timestamp")
    p.add_argument("--header", choices=("auto", "yes", "no"), default="auto")
    p.add_argument("--min-support", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on processed files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--log", help="write the per-epoch log as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="P@K / MRR@K of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", help="top-K next items for one session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session", required=True, help="comma-separated item ids")
    p.add_argument("--k", type=int, default=20)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suites")
    p.add_argument("--quick", action="store_true", help="primitives plus the full toy model only")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synthesize", help="write a synthetic corpus")
    p.add_argument("--kind", choices=("markov", "long_range"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("events", "instances"), default="events")
    p.add_argument("--n-items", type=int, default=20)
    p.add_argument("--n-sessions", type=int, default=1000)
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--gap", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "synthesize" and args.kind == "markov":
        args.min_len = 2 if args.min_len is None else args.min_len
        args.max_len = 8 if args.max_len is None else args.max_len
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trasa {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError, IndexError) as exc:
        print(f"trasa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
