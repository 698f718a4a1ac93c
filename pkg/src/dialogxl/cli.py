"""``dialogxl`` command line: train, eval, synth, analyze-memory, ablate, dump-masks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import numerics as nx
from .attention import ConfigurationError
from .data import DataError, dump_conversations, load_conversations, synth_generate
from .model import ModelConfig, UnknownSpeakerError, load_checkpoint
from .training import (
    NumericFailure, TrainConfig, _load_pair, ablate, analyze_memory, dump_masks, evaluate,
    length_profile, parse_removals, rows_to_csv, runs_log_csv, train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_or_inf(s):
    return math.inf if s.lower() in ("inf", "none") else float(s)


def _pair(s):
    parts = [int(p) for p in s.split(",")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected N or LO,HI, got {s!r}")
    return tuple(parts)


def _mix(s):
    try:
        vals = tuple(float(p) for p in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--mix expects three numbers, got {s!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("--mix expects LOCAL,INTRA,INTER weights")
    return vals


def _sweep(s):
    """``100:1000:100`` (inclusive stop) or a comma list."""
    if ":" in s:
        lo, hi, step = (int(p) for p in s.split(":"))
        if step <= 0 or hi < lo:
            raise argparse.ArgumentTypeError(f"bad sweep {s!r}")
        return list(range(lo, hi + 1, step))
    return [int(p) for p in s.split(",")]


def _write(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_config(path, seed=None):
    try:
        cfg = TrainConfig.from_file(path)
        ModelConfig(vocab_size=1, n_labels=1, **cfg.model)
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise UsageError(f"bad config {path}: {e}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if not cfg.train or not cfg.val:
        raise UsageError("config needs 'train' and 'val' paths")
    return cfg


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.log:
        cfg = replace(cfg, log=args.log)
    results = train(cfg, runs=args.runs)
    if not cfg.log:
        sys.stdout.write(runs_log_csv(results, cfg.seed))
    for r, res in enumerate(results):
        print(f"seed {cfg.seed + r}: best epoch {res.best_epoch}, val {cfg.metric} {res.best_metric:.4f}",
              file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    rep = evaluate(args.checkpoint, args.data, args.metric, args.exclude_label)
    if args.report:
        _write(rep.to_csv(), args.report)
    print(json.dumps({"metric": args.metric, "value": rep.metric(args.metric),
                      "weighted_f1": rep.weighted_f1, "micro_f1": rep.micro_f1,
                      "accuracy": rep.accuracy, "excluded_label": rep.excluded_label,
                      "rule_accuracy": rep.rule_accuracy}, indent=1))
    return EXIT_OK


def cmd_synth(args):
    try:
        convs, _, labels = synth_generate(args.seed, args.n, speakers=args.speakers, length=args.length,
                                          task_mix=args.mix, id_prefix=args.prefix)
    except ValueError as e:
        raise UsageError(str(e)) from None
    dump_conversations(convs, labels, args.out)
    print(f"wrote {len(convs)} conversations to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze_memory(args):
    if (args.data is None) == (args.profile is None):
        raise UsageError("give exactly one of --data or --profile")
    if args.data is not None:
        dataset, _, _ = load_conversations(args.data)
    else:
        dataset = length_profile(args.seed, args.profile, args.ratio, args.max_tokens)
    _write(rows_to_csv(analyze_memory(dataset, args.sweep, args.batch)), args.out)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config)
    try:
        removals = parse_removals(args.remove)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    train_convs, val_convs, vocab, labels, speakers = _load_pair(cfg)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = ablate(train_convs, val_convs, len(vocab), labels, cfg.model, cfg, removals, seeds,
                  n_speakers=max(len(speakers), 2))
    _write(rows_to_csv(rows), args.out)
    return EXIT_OK


def cmd_dump_masks(args):
    window, max_len, vocab = args.window, args.max_len, None
    if args.checkpoint:
        model, vocab, labels, speakers = load_checkpoint(args.checkpoint)
        convs, _, _ = load_conversations(args.data, vocab, labels, dict(speakers))
        window, max_len = model.config.window, model.config.max_mem
    else:
        convs, vocab, _ = load_conversations(args.data)
    by_id = {c.conversation_id: c for c in convs}
    if args.conversation not in by_id:
        raise DataError(f"no conversation {args.conversation!r} in {args.data}")
    try:
        dump_masks(by_id[args.conversation], args.t, args.out, window, max_len, vocab)
    except IndexError as e:
        raise UsageError(str(e)) from None
    return EXIT_OK


def build_parser():
    p = _Parser(prog="dialogxl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--out", help="checkpoint path (overrides config)")
    s.add_argument("--log", help="training log CSV (overrides config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metric", default="weighted_f1", choices=["weighted_f1", "micro_f1", "accuracy"])
    s.add_argument("--exclude-label")
    s.add_argument("--report", help="per-label CSV report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate synthetic labelled dialogs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--mix", type=_mix, default=(1 / 3, 1 / 3, 1 / 3), help="LOCAL,INTRA,INTER weights")
    s.add_argument("--n", type=int, default=1000, help="number of conversations")
    s.add_argument("--speakers", type=_pair, default=(2, 4), help="N or LO,HI")
    s.add_argument("--length", type=_pair, default=(3, 8), help="utterances per conversation, N or LO,HI")
    s.add_argument("--prefix", default="synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("analyze-memory", help="segment vs utterance recurrence waste")
    s.add_argument("--data")
    s.add_argument("--profile", type=int, help="use N synthetic length-only conversations instead of --data")
    s.add_argument("--ratio", type=float, default=0.35, help="mean/max length ratio for --profile")
    s.add_argument("--max-tokens", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sweep", type=_sweep, default=list(range(100, 1001, 100)))
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_analyze_memory)

    s = sub.add_parser("ablate", help="train full and head-ablated models")
    s.add_argument("--config", required=True)
    s.add_argument("--remove", required=True, help="comma list of types; join with & to remove together")
    s.add_argument("--seeds", type=int, default=1, help="number of seeds from the config seed")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dump-masks", help="write the four attention masks for one utterance")
    s.add_argument("--data", required=True)
    s.add_argument("--conversation", required=True)
    s.add_argument("--t", type=int, required=True, help="1-based utterance index")
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=_float_or_inf, default=math.inf)
    s.add_argument("--max-len", type=_float_or_inf, default=math.inf)
    s.add_argument("--checkpoint", help="take window/max_len and vocabulary from a checkpoint")
    s.set_defaults(func=cmd_dump_masks)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"dialogxl: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, nx.NonFiniteGradientError, nx.DegenerateRowError, FloatingPointError) as e:
        print(f"dialogxl: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, UnknownSpeakerError, FileNotFoundError, KeyError, IndexError, ValueError) as e:
        print(f"dialogxl: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
