"""Command line entry point: train, eval, generate, profile, gradcheck, analyze.

Exit codes: 0 success, 1 check or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .. import tensor as T
from ..gradcheck import EQUIV_TOL, FD_TOL, primitive_suite, scheme_equivalence, segment_step_check
from ..model import CheckpointError, SegmentBatch, load_checkpoint
from ..training import UsageError
from . import profiler
from .config import ConfigError, load_config
from .runner import analyze_stream, build_stream, evaluate, summarize_slots, train
from .tasks import PGMFormatError, image_tokens_to_array, write_pgm

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run", help="directory for log.jsonl and checkpoints")
    t.add_argument("--scheme", choices=("mrbp", "bptt", "gc"), help="override the config scheme")
    t.add_argument("--steps", type=int, help="override training_steps")
    t.add_argument("--checkpoint-every", type=int, default=0)

    e = sub.add_parser("eval", help="perplexity and accuracy on the held-out stream")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--segments", type=int, help="limit on evaluated segments")

    g = sub.add_parser("generate", help="roll memory through a prompt and emit segments")
    g.add_argument("--config", required=True)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt-segments", type=int, default=1)
    g.add_argument("--segments", type=int, default=4)
    g.add_argument("--lanes", type=int, default=1)
    g.add_argument("--sampling", default="greedy", help="'greedy' or a positive temperature")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="directory for PGM files (image task)")
    g.add_argument("--trace-memory", action="store_true",
                   help="report peak live tensor bytes after every generated segment")

    pr = sub.add_parser("profile", help="analytic FLOPs and memory footprint as CSV")
    pr.add_argument("--arch", default="all", choices=("all",) + profiler.ARCHS)
    pr.add_argument("--n", default="128..8192", help="'lo..hi' doubling sweep or a comma list")
    pr.add_argument("--out", help="write CSV here instead of stdout")

    gc = sub.add_parser("gradcheck", help="finite-difference and scheme-equivalence suites")
    gc.add_argument("--cases", type=int, default=100, help="random cases per primitive")
    gc.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("analyze", help="slot write statistics as JSON lines")
    a.add_argument("--config", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--segments", type=int, default=12)
    a.add_argument("--hi", type=float, default=0.8)
    a.add_argument("--lo", type=float, default=0.2)
    a.add_argument("--lanes", type=int, help="evaluate on this many lanes only")
    return p


def _model_for(cfg, stream, checkpoint):
    expected = cfg.model_config(stream.vocab_size)
    return load_checkpoint(checkpoint, expected, dtype=cfg.dtype)


def _cmd_train(args, out):
    cfg = load_config(args.config)
    if args.scheme:
        cfg.scheme = args.scheme
    if args.steps is not None:
        cfg.training_steps = args.steps
    os.makedirs(args.out, exist_ok=True)
    res = train(cfg, log_path=os.path.join(args.out, "log.jsonl"),
                checkpoint_dir=os.path.join(args.out, "checkpoints"),
                checkpoint_every=args.checkpoint_every)
    ev = evaluate(res.model, build_stream(cfg, "eval"), cfg.eval_segments)
    print(json.dumps({"final_train_loss": res.log[-1]["loss"] if res.log else None,
                      "eval": ev.to_dict()}), file=out)
    return EXIT_OK


def _cmd_eval(args, out):
    cfg = load_config(args.config)
    stream = build_stream(cfg, "eval")
    model = _model_for(cfg, stream, args.checkpoint)
    print(json.dumps(evaluate(model, stream, args.segments or cfg.eval_segments).to_dict()), file=out)
    return EXIT_OK


def _cmd_generate(args, out):
    cfg = load_config(args.config)
    stream = build_stream(cfg, "eval")
    model = _model_for(cfg, stream, args.checkpoint)
    lanes = min(args.lanes, stream.batch)
    if args.prompt_segments < 1 or args.prompt_segments > stream.n_segments:
        raise UsageError("prompt-segments must be between 1 and the stream length")
    prompt = [SegmentBatch(stream.tokens[:lanes, i], stream.lengths[:lanes, i])
              for i in range(args.prompt_segments)]
    sampling = args.sampling if args.sampling == "greedy" else float(args.sampling)
    trace = []

    def on_segment(i, memory):
        if args.trace_memory:
            trace.append({"segment": i + 1, "peak_live_bytes": int(T._LiveBytes.peak)})
            T._LiveBytes.reset_peak()

    rng = np.random.default_rng(args.seed)
    if args.trace_memory:
        with T.track_live_bytes():
            tokens = model.generate(prompt, args.segments, sampling, rng, on_segment)
    else:
        tokens = model.generate(prompt, args.segments, sampling, rng, on_segment)
    for lane in range(lanes):
        print(json.dumps({"lane": lane, "tokens": tokens[lane].tolist()}), file=out)
    for row in trace:
        print(json.dumps(row), file=out)
    if cfg.task == "image_seq" and args.out:
        os.makedirs(args.out, exist_ok=True)
        per = cfg.image_size ** 2
        for lane in range(lanes):
            seq = tokens[lane]
            for j in range(len(seq) // per):
                img = image_tokens_to_array(seq[j * per:(j + 1) * per], cfg.image_size, cfg.bit_depth)
                write_pgm(os.path.join(args.out, f"lane{lane}_img{j}.pgm"), img)
    return EXIT_OK


def _cmd_profile(args, out):
    try:
        lengths = profiler.parse_sweep(args.n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    archs = profiler.ARCHS if args.arch == "all" else (args.arch,)
    text = profiler.rows_to_csv(profiler.sweep_rows(archs, lengths))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)
    return EXIT_OK


def _cmd_gradcheck(args, out):
    ok = True
    for name, err in primitive_suite(args.cases, args.seed).items():
        passed = err < FD_TOL
        ok &= passed
        print(f"primitive {name:14s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}", file=out)
    seg = segment_step_check(seed=args.seed)
    worst = max(seg.values())
    ok &= worst < FD_TOL
    print(f"segment_step       max_rel_err={worst:.3e} {'ok' if worst < FD_TOL else 'FAIL'}", file=out)
    rep = scheme_equivalence(seed=args.seed, boundary_at=2)
    for name, err in rep.max_rel_error.items():
        passed = err < EQUIV_TOL
        ok &= passed
        print(f"{name}==bptt          max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}", file=out)
    print("gradcheck " + ("passed" if ok else "FAILED"), file=out)
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_analyze(args, out):
    cfg = load_config(args.config)
    stream = build_stream(cfg, "eval")
    if args.lanes:
        from .tasks import TokenStream
        n = min(args.lanes, stream.batch)
        b = stream.boundaries if stream.boundaries.ndim == 1 else stream.boundaries[:n]
        stream = TokenStream(stream.tokens[:n], stream.lengths[:n], b, stream.vocab_size,
                             None if stream.scored is None else stream.scored[:n])
    model = _model_for(cfg, stream, args.checkpoint)
    if model.config.no_memory:
        raise UsageError("analyze needs a model with memory")
    rows = analyze_stream(model, stream, args.segments, args.hi, args.lo)
    for r in rows:
        print(json.dumps(r), file=out)
    print(json.dumps({"summary": summarize_slots(rows)}), file=out)
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "generate": _cmd_generate,
            "profile": _cmd_profile, "gradcheck": _cmd_gradcheck, "analyze": _cmd_analyze}


def run_cli(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, PGMFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
