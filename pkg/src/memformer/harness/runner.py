"""Training and evaluation loops over a :class:`TokenStream`."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .. import tensor as T
from ..memory import MemoryState, slot_write_stats
from ..model import Memformer, save_checkpoint
from ..training import SCHEMES, UsageError
from ..tensor import CounterRNG
from .config import TrainConfig
from .tasks import TokenStream, load_char_corpus, load_image_sequences, make_recall_task

LOG_KEYS = ("step", "loss", "ppl", "lr", "grad_norm", "peak_retained_bytes", "recompute_count",
            "wall_ms")

# the held-out stream uses a different generator seed from training
EVAL_SEED_OFFSET = 104729


def build_stream(cfg: TrainConfig, split: str = "train") -> TokenStream:
    train = split == "train"
    spec = cfg.task_spec(0 if train else EVAL_SEED_OFFSET, train)
    spec.validate()
    if cfg.task == "recall":
        return make_recall_task(spec)
    if cfg.task == "image_seq":
        return load_image_sequences(spec)
    if cfg.corpus_path is None:
        raise UsageError("char_lm needs corpus_path")
    stream = load_char_corpus(cfg.corpus_path, cfg.segment_len, cfg.batch_size)
    if split == "train":
        return stream
    # no separate held-out file: evaluate on the last tenth of every lane
    cut = max(2, stream.n_segments // 10)
    b = stream.boundaries
    b = b[-cut:].copy() if b.ndim == 1 else b[:, -cut:].copy()
    if b.ndim == 1:
        b[0] = True
    else:
        b[:, 0] = True
    return TokenStream(stream.tokens[:, -cut:], stream.lengths[:, -cut:], b, stream.vocab_size)


def _reset(model: Memformer, memory: MemoryState, flags) -> MemoryState:
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return memory
    fresh = model.init_memory(memory.batch)
    if flags.all():
        return fresh
    keep = (~flags)[:, None, None]
    return MemoryState(T.Tensor(np.where(keep, memory.slots.data, fresh.slots.data)), memory.step)


@dataclass
class EvalResult:
    loss: float
    ppl: float
    accuracy: float
    answer_accuracy: Optional[float]
    n_tokens: int
    n_segments: int

    def to_dict(self):
        return {"loss": self.loss, "ppl": self.ppl, "accuracy": self.accuracy,
                "answer_accuracy": self.answer_accuracy, "n_tokens": self.n_tokens,
                "n_segments": self.n_segments}


def evaluate(model: Memformer, stream: TokenStream, max_segments: Optional[int] = None,
             on_step: Callable = None) -> EvalResult:
    """Run the stream left to right, carrying memory; no graph is recorded.

    ``on_step(i, model, memory)`` is called after each segment is encoded.
    """
    n = stream.n_segments if max_segments is None else min(stream.n_segments, max_segments + 1)
    was, model.training = model.training, False
    memory = model.init_memory(stream.batch)
    tot_loss = tot_tok = correct = 0.0
    ans_hit = ans_tot = 0
    with T.no_grad():
        for i in range(n - 1):
            flags = stream.boundaries[i] if stream.boundaries.ndim == 1 else stream.boundaries[:, i]
            memory = _reset(model, memory, flags)
            loss, memory, met = model.segment_step(stream.segment(i), stream.segment(i + 1), memory)
            tot_loss += met["loss"] * met["n_tokens"]
            tot_tok += met["n_tokens"]
            correct += met["accuracy"] * met["n_tokens"]
            if stream.scored is not None:
                sc = stream.scored[:, i + 1]
                ans_hit += int((met["predictions"] == stream.tokens[:, i + 1])[sc].sum())
                ans_tot += int(sc.sum())
            if on_step is not None:
                on_step(i, model, memory)
    model.training = was
    loss = tot_loss / max(tot_tok, 1)
    return EvalResult(loss, math.exp(min(loss, 700.0)), correct / max(tot_tok, 1),
                      ans_hit / ans_tot if ans_tot else None, int(tot_tok), n - 1)


@dataclass
class TrainResult:
    model: Memformer
    log: list = field(default_factory=list)
    final_memory: Optional[MemoryState] = None
    opt: object = None


def train(cfg: TrainConfig, log_path=None, checkpoint_dir=None, checkpoint_every: int = 0,
          stream: TokenStream = None, on_step: Callable = None, verbose: bool = False) -> TrainResult:
    """Run rollout updates with the configured scheme.

    Rollouts of ``time_horizon`` steps tile the stream with stride
    ``cfg.stride``; the memory handed to the next rollout is the one the
    current rollout produced for the segment the next rollout starts on.
    With ``cfg.curriculum`` set (and no explicit ``stream``) the recall
    distance follows the listed stages before the final ``training_steps`` at
    ``cfg.distance``; weights and optimiser state carry across stages.
    """
    if cfg.scheme not in SCHEMES:
        raise UsageError(f"unknown scheme {cfg.scheme!r}; choose from {sorted(SCHEMES)}")
    Tn, stride = cfg.time_horizon, cfg.stride
    if Tn < 1 or not 1 <= stride <= Tn:
        raise UsageError("need time_horizon >= 1 and 1 <= rollout_stride <= time_horizon")
    if stream is not None or not cfg.curriculum:
        stages = [(cfg, stream)]
    else:
        stages = [(replace(cfg, distance=d, training_steps=n), None) for d, n in cfg.stages()]
    model = opt = memory = None
    log = []
    step = 1
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for stage_cfg, stage_stream in stages:
            stage_stream = stage_stream if stage_stream is not None else build_stream(stage_cfg)
            if stage_stream.n_segments < Tn + 1:
                raise UsageError(f"stream has {stage_stream.n_segments} segments, "
                                 "fewer than time_horizon + 1")
            if model is None:
                model = Memformer(cfg.model_config(stage_stream.vocab_size))
                opt = cfg.optim_state()
            model.training = True
            memory = model.init_memory(stage_stream.batch)
            start = 0
            update = SCHEMES[cfg.scheme]
            last = step + stage_cfg.training_steps - 1
            for step in range(step, last + 1):
                if start + Tn >= stage_stream.n_segments:
                    start, memory = 0, model.init_memory(stage_stream.batch)
                rollout = stage_stream.rollout(start, Tn)
                rng = CounterRNG(cfg.seed, (step,)) if cfg.dropout > 0 else None
                res = update(model, rollout, [memory], opt, rng)
                memory = res.memories[stride - 1]
                start += stride
                acc = res.accounting
                row = {"step": step, "loss": res.loss, "ppl": math.exp(min(res.loss, 700.0)),
                       "lr": opt.last_lr, "grad_norm": opt.last_grad_norm,
                       "peak_retained_bytes": int(acc.peak_retained_bytes),
                       "recompute_count": acc.recompute_count, "wall_ms": acc.wall_ms}
                log.append(row)
                if fh is not None and (step % max(cfg.log_every, 1) == 0 or step == last):
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
                if verbose and step % 50 == 0:
                    print(f"step {step} loss {res.loss:.4f} lr {opt.last_lr:.2e}", flush=True)
                if on_step is not None:
                    on_step(step, model, memory)
                if checkpoint_dir and checkpoint_every and step % checkpoint_every == 0:
                    save_checkpoint(model, os.path.join(checkpoint_dir, f"step{step:07d}.ckpt"))
            step = last + 1
    finally:
        if fh is not None:
            fh.close()
    model.training = False
    T.get_tape().clear()
    if checkpoint_dir:
        save_checkpoint(model, os.path.join(checkpoint_dir, "final.ckpt"))
    return TrainResult(model, log, memory, opt)


def analyze_stream(model: Memformer, stream: TokenStream, n_segments: int, hi=0.8, lo=0.2,
                   top=3) -> list[dict]:
    """Slot write statistics for each of the first ``n_segments`` encoder steps."""
    rows = []

    def grab(i, m, memory):
        if m.last_write_record is not None:
            rows.extend(slot_write_stats(m.last_write_record, i, hi, lo, top))

    evaluate(model, stream, n_segments, on_step=grab)
    return rows


def summarize_slots(rows: list[dict]) -> dict:
    counts = {}
    for r in rows:
        counts[r["category"]] = counts.get(r["category"], 0) + 1
    max_self = max((r["self_mass"] for r in rows), default=0.0)
    return {"records": len(rows), "categories": counts, "max_self_mass": max_self}
