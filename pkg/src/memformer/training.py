"""Update schemes over a rollout of consecutive segments.

All three schemes compute the same gradient (the mean of the per-step
token-mean losses, differentiated through the memory chain inside the
rollout) and differ only in what they keep alive:

* ``bptt_update`` records every step and does one backward pass.
* ``gc_update`` runs forward without a graph, checkpoints each step's input
  memory and encoder output, then replays each step (decoder from the saved
  encoder output, encoder from the saved memory).
* ``mrbp_update`` runs forward without a graph keeping only the memories, then
  replays one whole step at a time in reverse, seeding the step's output
  memory with the gradient handed back from the step after it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .memory import MemoryState
from .model import Memformer, SegmentBatch, shift_right
from .tensor import CounterRNG, Tensor


class UsageError(ValueError):
    pass


@dataclass
class Rollout:
    """T+1 consecutive segments; step t encodes segments[t] and predicts segments[t+1].

    ``boundaries[t]`` marks segments[t] as the first segment of a document:
    the memory is re-initialised before encoding it.
    """
    segments: list
    boundaries: Optional[list] = None

    def __post_init__(self):
        if len(self.segments) < 2:
            raise UsageError("a rollout needs at least two segments")
        if self.boundaries is None:
            self.boundaries = [False] * len(self.segments)
        if len(self.boundaries) != len(self.segments):
            raise UsageError("boundary flags must align with segments")

    @property
    def T(self):
        return len(self.segments) - 1

    @property
    def batch(self):
        return self.segments[0].batch


@dataclass
class ReplayBuffer:
    memories: list = field(default_factory=list)

    def append(self, memory: MemoryState):
        self.memories.append(memory)

    def pop_oldest(self) -> MemoryState:
        return self.memories.pop(0)

    @property
    def nbytes(self):
        return sum(m.nbytes for m in self.memories)

    def __len__(self):
        return len(self.memories)

    def __getitem__(self, i):
        return self.memories[i]


@dataclass
class OptimState:
    lr: float = 1e-3
    warmup_steps: int = 1000
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_lr: float = 0.0
    last_grad_norm: float = 0.0

    def lr_at(self, step: int) -> float:
        """Linear warmup, then inverse-square-root decay."""
        if self.warmup_steps <= 0:
            return self.lr
        s = max(step, 1)
        return self.lr * min(s / self.warmup_steps, math.sqrt(self.warmup_steps / s))


@dataclass
class MemoryAccounting:
    peak_retained_bytes: int = 0
    recompute_count: int = 0
    wall_ms: float = 0.0
    step_metrics: list = field(default_factory=list)


class UpdateResult(NamedTuple):
    loss: float
    memories: ReplayBuffer
    accounting: MemoryAccounting


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: dict, opt: OptimState, grads: Optional[dict] = None) -> float:
    """AdamW with global-norm clipping; returns the pre-clip gradient norm.

    ``grads`` maps names to arrays; by default each parameter's tape gradient is
    used (missing gradients count as zeros).  Weight decay skips 1-d tensors.
    """
    g_by_name = {}
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        g_by_name[name] = g
    norm = math.sqrt(sum(float((g * g).sum()) for g in g_by_name.values()))
    clip = 1.0
    if opt.max_grad_norm and norm > opt.max_grad_norm:
        clip = opt.max_grad_norm / norm
    opt.step += 1
    lr = opt.lr_at(opt.step)
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = g_by_name[name] * clip
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if opt.weight_decay and p.ndim > 1:
            p.data -= lr * opt.weight_decay * p.data
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)
    opt.last_lr = lr
    opt.last_grad_norm = norm
    return norm


# ---------------------------------------------------------------------------
# shared step plumbing


def _check(rollout: Rollout, memories_in):
    if memories_in is None or len(memories_in) < 1:
        raise UsageError("memories_in must hold at least the rollout's starting memory")
    if len(memories_in) > rollout.T + 1:
        raise UsageError(f"memories_in has {len(memories_in)} entries for a rollout of T={rollout.T}")
    if memories_in[0].batch != rollout.batch:
        raise UsageError("starting memory batch does not match the rollout")


def _input_memory(model, rollout, t, memory):
    """Re-initialise memory where segments[t] opens a document (per lane or all lanes)."""
    flag = np.asarray(rollout.boundaries[t], dtype=bool)
    if not flag.any():
        return memory
    fresh = model.init_memory(rollout.segments[t].batch)
    if flag.all():
        return fresh
    sel = flag.astype(memory.slots.dtype)[:, None, None]
    slots = T.add(T.multiply(memory.slots, 1.0 - sel), T.multiply(fresh.slots, sel))
    return MemoryState(slots, memory.step)


def _metrics(met):
    return {k: v for k, v in met.items()}


def _finish(model, opt, rollout, buffer: ReplayBuffer, acc, losses, t0):
    if opt is not None:
        adam_step(model.params, opt)
    buffer.pop_oldest()
    acc.wall_ms = (time.perf_counter() - t0) * 1e3
    return UpdateResult(float(np.mean(losses)), buffer, acc)


def _step_rng(rng: Optional[CounterRNG], t: int):
    return rng.fork(t) if rng is not None else None


# ---------------------------------------------------------------------------
# schemes


def bptt_update(model: Memformer, rollout: Rollout, memories_in, opt: OptimState = None,
                rng: CounterRNG = None) -> UpdateResult:
    """Record all T steps, one backward over the summed loss."""
    _check(rollout, memories_in)
    t0 = time.perf_counter()
    tape = T.get_tape()
    tape.clear()
    tape.reset_peak()
    model.zero_grad()
    acc = MemoryAccounting()
    Tn = rollout.T
    buffer = ReplayBuffer([memories_in[0].detached()])
    tape.hold(buffer.nbytes)
    losses = []
    with T.recording():
        mem = buffer[0].detached()
        total = None
        for t in range(Tn):
            mem = _input_memory(model, rollout, t, mem)
            loss, mem, met = model.segment_step(rollout.segments[t], rollout.segments[t + 1], mem,
                                                _step_rng(rng, t))
            acc.recompute_count += 1
            acc.step_metrics.append(_metrics(met))
            losses.append(float(loss.data))
            buffer.append(mem.detached())
            tape.hold(mem.nbytes)
            part = T.scale(loss, 1.0 / Tn)
            total = part if total is None else T.add(total, part)
        if total.node is not None:
            T.backward(total)
    acc.peak_retained_bytes = tape.peak_bytes
    tape.clear()
    tape.release(buffer.nbytes)
    return _finish(model, opt, rollout, buffer, acc, losses, t0)


def gc_update(model: Memformer, rollout: Rollout, memories_in, opt: OptimState = None,
              rng: CounterRNG = None) -> UpdateResult:
    """Per-timestep checkpointing at {segment, M_t, encoder output H_t}."""
    _check(rollout, memories_in)
    t0 = time.perf_counter()
    tape = T.get_tape()
    tape.clear()
    tape.reset_peak()
    model.zero_grad()
    acc = MemoryAccounting()
    Tn = rollout.T
    buffer = ReplayBuffer([memories_in[0].detached()])
    hidden = []
    held = buffer.nbytes
    tape.hold(held)
    losses = []
    with T.no_grad():
        for t in range(Tn):
            mem = _input_memory(model, rollout, t, buffer[t])
            loss, nxt, met = _checkpointed_forward(model, rollout, t, mem, rng, hidden)
            acc.recompute_count += 1
            acc.step_metrics.append(_metrics(met))
            losses.append(float(loss))
            buffer.append(nxt.detached())
            tape.hold(nxt.nbytes + hidden[-1][0].nbytes)
            held += nxt.nbytes + hidden[-1][0].nbytes

    grad_mem = None
    for t in range(Tn - 1, -1, -1):
        h_data, key_mask = hidden[t]
        step_rng = _step_rng(rng, t)
        with T.recording():
            # decoder half from the saved encoder output
            h_leaf = Tensor(h_data, requires_grad=True)
            target = rollout.segments[t + 1]
            logits = model.decode(shift_right(target.tokens, model.config.bos_id), h_leaf, key_mask,
                                  step_rng.fork(1) if step_rng else None)
            loss = T.cross_entropy(logits, target.tokens, target.pad_mask)
            T.backward(loss, np.asarray(1.0 / Tn, dtype=loss.dtype))
            grad_h = h_leaf.grad
            # encoder half from the saved memory
            mem_leaf = buffer[t].detached(requires_grad=True)
            mem = _input_memory(model, rollout, t, mem_leaf)
            enc, nxt = model.encode(rollout.segments[t], mem, step_rng.fork(0) if step_rng else None)
            acc.recompute_count += 1
            if grad_h is not None and enc.node is not None:
                T.backward(enc, grad_h)
            if grad_mem is not None and nxt.slots.node is not None and not nxt.slots.node.is_leaf:
                T.backward(nxt.slots, grad_mem)
        grad_mem = mem_leaf.slots.grad
        tape.clear()
    acc.peak_retained_bytes = tape.peak_bytes
    tape.release(held)
    return _finish(model, opt, rollout, buffer, acc, losses, t0)


def _checkpointed_forward(model, rollout, t, mem, rng, hidden):
    step_rng = _step_rng(rng, t)
    seg, target = rollout.segments[t], rollout.segments[t + 1]
    enc, nxt = model.encode(seg, mem, step_rng.fork(0) if step_rng else None)
    key_mask = model._enc_key_mask
    hidden.append((enc.data.copy(), key_mask))
    logits = model.decode(shift_right(target.tokens, model.config.bos_id), enc, key_mask,
                          step_rng.fork(1) if step_rng else None)
    loss = T.cross_entropy(logits, target.tokens, target.pad_mask)
    mask = target.pad_mask
    pred = logits.data.argmax(axis=-1)
    n = int(mask.sum())
    lv = float(loss.data)
    met = {"loss": lv, "ppl": math.exp(min(lv, 700.0)),
           "accuracy": int(((pred == target.tokens) & mask).sum()) / max(n, 1),
           "n_tokens": n, "predictions": pred}
    return lv, nxt, met


def mrbp_update(model: Memformer, rollout: Rollout, memories_in, opt: OptimState = None,
                rng: CounterRNG = None, replay_losses: list = None) -> UpdateResult:
    """Memory replay back-propagation.

    Phase 1 runs the rollout without a graph, keeping only the memories.
    Phase 2 walks back from the last step: replay the step from its saved input
    memory, backprop its loss, backprop the gradient handed down for its output
    memory, and pass the input memory's gradient to the previous step.
    ``replay_losses`` (if a list) receives the phase-2 loss values, last step first.
    """
    _check(rollout, memories_in)
    t0 = time.perf_counter()
    tape = T.get_tape()
    tape.clear()
    tape.reset_peak()
    model.zero_grad()
    acc = MemoryAccounting()
    Tn = rollout.T
    buffer = ReplayBuffer([memories_in[0].detached()])
    tape.hold(buffer.nbytes)
    losses = []
    with T.no_grad():
        for t in range(Tn):
            mem = _input_memory(model, rollout, t, buffer[t])
            loss, nxt, met = model.segment_step(rollout.segments[t], rollout.segments[t + 1], mem,
                                                _step_rng(rng, t))
            acc.recompute_count += 1
            acc.step_metrics.append(_metrics(met))
            losses.append(float(loss.data))
            buffer.append(nxt.detached())
            tape.hold(nxt.nbytes)

    grad_mem = None  # zero at the last step
    seed = None
    for t in range(Tn - 1, -1, -1):
        with T.recording():
            mem_leaf = buffer[t].detached(requires_grad=True)
            mem = _input_memory(model, rollout, t, mem_leaf)
            loss, nxt, _ = model.segment_step(rollout.segments[t], rollout.segments[t + 1], mem,
                                              _step_rng(rng, t))
            acc.recompute_count += 1
            if replay_losses is not None:
                replay_losses.append(float(loss.data))
            if seed is None:
                seed = np.asarray(1.0 / Tn, dtype=loss.dtype)
            if loss.node is not None:
                T.backward(loss, seed)
            if grad_mem is not None and nxt.slots.node is not None and not nxt.slots.node.is_leaf:
                T.backward(nxt.slots, grad_mem)
        grad_mem = mem_leaf.slots.grad
        tape.clear()
    acc.peak_retained_bytes = tape.peak_bytes
    tape.release(sum(m.nbytes for m in buffer.memories))
    return _finish(model, opt, rollout, buffer, acc, losses, t0)


SCHEMES = {"mrbp": mrbp_update, "bptt": bptt_update, "gc": gc_update}
