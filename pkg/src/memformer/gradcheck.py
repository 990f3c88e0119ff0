"""Finite-difference and cross-scheme gradient suites.

Each primitive is checked through a scalar probe ``sum(op(...) * R)`` with a
fixed random ``R``, so the full output Jacobian is exercised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .memory import MemoryState
from .model import Memformer, ModelConfig, SegmentBatch
from .tensor import CounterRNG, Tensor, finite_diff_check
from .training import SCHEMES, Rollout

FD_TOL = 1e-4
EQUIV_TOL = 1e-6


def _probe(y: Tensor, R: np.ndarray) -> Tensor:
    return T.sum_(T.multiply(y, R))


def _shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi, rng.integers(ndim_lo, ndim_hi + 1)))


def _case(rng, name) -> tuple[Callable, np.ndarray]:
    """Return (f, point) for one random instance of primitive ``name``."""
    n = rng.normal
    if name in ("add", "subtract", "multiply"):
        shp = _shape(rng, 1, 3)
        # the other operand is broadcast from a trailing sub-shape half the time
        other_shape = shp[rng.integers(0, len(shp)):] if rng.random() < 0.5 else shp
        other = n(size=other_shape)
        left = rng.random() < 0.5
        op = {"add": T.add, "subtract": T.subtract, "multiply": T.multiply}[name]
        R = n(size=shp)
        if left:
            return (lambda x: _probe(op(x, other), R)), n(size=shp)
        base = n(size=shp)
        return (lambda x: _probe(op(base, x), R)), n(size=other_shape)
    if name == "scale":
        shp, c = _shape(rng), float(n())
        R = n(size=shp)
        return (lambda x: _probe(T.scale(x, c), R)), n(size=shp)
    if name == "sum":
        shp = _shape(rng, 1, 3)
        axis = None if rng.random() < 0.3 else int(rng.integers(-len(shp), len(shp)))
        keep = bool(rng.random() < 0.5)
        out_shape = np.zeros(shp).sum(axis=axis, keepdims=keep).shape
        R = n(size=out_shape)
        return (lambda x: _probe(T.sum_(x, axis=axis, keepdims=keep), R)), n(size=shp)
    if name == "mean":
        shp = _shape(rng)
        c = float(n())
        return (lambda x: T.scale(T.mean(x), c)), n(size=shp)
    if name == "gelu":
        shp = _shape(rng)
        R = n(size=shp)
        return (lambda x: _probe(T.gelu(x), R)), 2.0 * n(size=shp)
    if name == "matmul":
        batch = _shape(rng, 0, 1)
        i, k, j = (int(v) for v in rng.integers(1, 5, 3))
        a_shape, b_shape = batch + (i, k), batch + (k, j)
        R = n(size=batch + (i, j))
        if rng.random() < 0.5:
            b = n(size=b_shape)
            return (lambda x: _probe(T.matmul(x, b), R)), n(size=a_shape)
        a = n(size=a_shape)
        return (lambda x: _probe(T.matmul(a, x), R)), n(size=b_shape)
    if name == "linear":
        lead = _shape(rng, 1, 2)
        di, do = (int(v) for v in rng.integers(1, 6, 2))
        xs, w, b = n(size=lead + (di,)), n(size=(di, do)), n(size=do)
        R = n(size=lead + (do,))
        which = int(rng.integers(0, 3))
        if which == 0:
            return (lambda x: _probe(T.linear(x, w, b), R)), xs
        if which == 1:
            return (lambda x: _probe(T.linear(xs, x, b), R)), w
        return (lambda x: _probe(T.linear(xs, w, x), R)), b
    if name == "transpose":
        shp = _shape(rng, 2, 4)
        axes = tuple(int(a) for a in rng.permutation(len(shp)))
        R = n(size=tuple(shp[a] for a in axes))
        return (lambda x: _probe(T.transpose(x, axes), R)), n(size=shp)
    if name == "reshape":
        shp = _shape(rng, 1, 3)
        new = (-1,) if rng.random() < 0.5 else (int(np.prod(shp)), 1)
        R = n(size=np.zeros(shp).reshape(new).shape)
        return (lambda x: _probe(T.reshape(x, new), R)), n(size=shp)
    if name == "concat":
        shp = _shape(rng, 1, 3)
        axis = int(rng.integers(0, len(shp)))
        other_shape = list(shp)
        other_shape[axis] = int(rng.integers(1, 4))
        other = n(size=other_shape)
        first = rng.random() < 0.5
        out_shape = list(shp)
        out_shape[axis] += other_shape[axis]
        R = n(size=out_shape)
        if first:
            return (lambda x: _probe(T.concat([x, other], axis), R)), n(size=shp)
        return (lambda x: _probe(T.concat([other, x], axis), R)), n(size=shp)
    if name == "slice":
        shp = _shape(rng, 1, 3, lo=2, hi=6)
        idx = []
        for s in shp:
            a = int(rng.integers(0, s))
            b = int(rng.integers(a + 1, s + 1))
            idx.append(slice(a, b))
        idx = tuple(idx)
        R = n(size=np.zeros(shp)[idx].shape)
        return (lambda x: _probe(T.slice_(x, idx), R)), n(size=shp)
    if name == "embedding":
        V, D = (int(v) for v in rng.integers(2, 7, 2))
        ids = rng.integers(0, V, _shape(rng, 1, 2))
        R = n(size=ids.shape + (D,))
        return (lambda x: _probe(T.embedding(x, ids), R)), n(size=(V, D))
    if name == "softmax":
        shp = _shape(rng, 1, 3, lo=2)
        tau = float(rng.uniform(0.25, 2.0))
        R = n(size=shp)
        return (lambda x: _probe(T.softmax_t(x, tau, axis=-1), R)), n(size=shp)
    if name == "l2_normalize":
        shp = _shape(rng, 1, 3, lo=2)
        R = n(size=shp)
        return (lambda x: _probe(T.l2_normalize(x), R)), n(size=shp) + 0.1
    if name == "layer_norm":
        lead = _shape(rng, 1, 2)
        D = int(rng.integers(2, 7))
        xs, g, b = n(size=lead + (D,)), 1.0 + 0.3 * n(size=D), 0.3 * n(size=D)
        R = n(size=lead + (D,))
        which = int(rng.integers(0, 3))
        if which == 0:
            return (lambda x: _probe(T.layer_norm(x, g, b), R)), xs
        if which == 1:
            return (lambda x: _probe(T.layer_norm(xs, x, b), R)), g
        return (lambda x: _probe(T.layer_norm(xs, g, x), R)), b
    if name == "dropout":
        shp = _shape(rng)
        rate, seed = float(rng.uniform(0.1, 0.6)), int(rng.integers(0, 2 ** 31))
        R = n(size=shp)
        return (lambda x: _probe(T.dropout(x, rate, CounterRNG(seed)), R)), n(size=shp)
    if name == "cross_entropy":
        B, L = (int(v) for v in rng.integers(1, 5, 2))
        V = int(rng.integers(2, 7))
        tgt = rng.integers(0, V, (B, L))
        mask = rng.random((B, L)) < 0.7
        mask.flat[0] = True
        return (lambda x: T.cross_entropy(x, tgt, mask)), 2.0 * n(size=(B, L, V))
    if name == "add_mask":
        shp = _shape(rng, 1, 3)
        add = 3.0 * n(size=shp)
        R = n(size=shp)
        return (lambda x: _probe(T.add_mask(x, add), R)), n(size=shp)
    raise KeyError(name)


PRIMITIVES = ("add", "subtract", "multiply", "scale", "sum", "mean", "gelu", "matmul", "linear",
              "transpose", "reshape", "concat", "slice", "embedding", "softmax", "l2_normalize",
              "layer_norm", "dropout", "cross_entropy", "add_mask")


def primitive_suite(n_cases: int = 100, seed: int = 0, names=PRIMITIVES) -> dict:
    """Worst finite-difference error per primitive over ``n_cases`` random instances."""
    worst = {}
    for j, name in enumerate(names):
        rng = np.random.default_rng([seed, j])
        errs = []
        for _ in range(n_cases):
            f, point = _case(rng, name)
            errs.append(finite_diff_check(f, point))
        worst[name] = float(max(errs))
    return worst


# ---------------------------------------------------------------------------
# whole model


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=20, model_dim=32, n_heads=4, ffn_dim=64, n_encoder_layers=2,
                n_decoder_layers=2, memory_slots=4, n_cls_tokens=4, max_segment_len=8,
                dropout_rate=0.0, dtype="float64", seed=0)
    base.update(kw)
    return ModelConfig(**base)


def toy_segments(cfg: ModelConfig, n: int, batch: int, rng, ragged=True):
    L = cfg.max_segment_len
    out = []
    for _ in range(n):
        lengths = rng.integers(max(1, L - 3), L + 1, batch) if ragged else None
        tok = rng.integers(2, cfg.vocab_size, (batch, L))
        out.append(SegmentBatch(tok, lengths))
    return out


def _rel(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    return float(diff / scale) if scale >= 1e-8 else float(diff)


def segment_step_check(cfg: ModelConfig = None, coords_per_param: int = 3, seed: int = 0,
                       eps: float = 1e-6) -> dict:
    """Finite differences of the full segment_step loss w.r.t. model parameters
    and the input memory.  Returns the worst error per tensor."""
    # larger init keeps every gradient well above finite-difference roundoff
    cfg = cfg or toy_config(model_dim=16, ffn_dim=32, n_heads=2, init_std=0.2)
    rng = np.random.default_rng(seed)
    model = Memformer(cfg)
    cur, nxt = toy_segments(cfg, 2, 2, rng)
    with T.no_grad():
        mem0 = model.init_memory(2)
        _, mem1, _ = model.segment_step(cur, nxt, mem0)
    mem_data = mem1.slots.data.copy()

    def loss_value():
        with T.no_grad():
            loss, _, _ = model.segment_step(cur, nxt, MemoryState(Tensor(mem_data)))
        return float(loss.data)

    out = {}
    with T.fresh_tape(), T.recording():
        model.zero_grad()
        m_leaf = Tensor(mem_data.copy(), requires_grad=True)
        loss, _, _ = model.segment_step(cur, nxt, MemoryState(m_leaf))
        T.backward(loss)
        grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                 for k, p in model.params.items()}
        g_mem = m_leaf.grad.copy()
    model.zero_grad()

    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, min(coords_per_param, flat.size), replace=False)
        a, num = [], []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_value()
            flat[i] = orig - eps
            fm = loss_value()
            flat[i] = orig
            num.append((fp - fm) / (2 * eps))
            a.append(grads[name].reshape(-1)[i])
        out[name] = _rel(np.array(a), np.array(num))

    def f_mem(x):
        loss, _, _ = model.segment_step(cur, nxt, MemoryState(x))
        return loss

    out["memory_in"] = finite_diff_check(f_mem, mem_data, eps)
    # the analytic memory gradient must agree with the one from the main pass
    out["memory_in_consistency"] = _rel(g_mem, _mem_grad(model, cur, nxt, mem_data))
    return out


def _mem_grad(model, cur, nxt, mem_data):
    with T.fresh_tape(), T.recording():
        m = Tensor(mem_data.copy(), requires_grad=True)
        loss, _, _ = model.segment_step(cur, nxt, MemoryState(m))
        T.backward(loss)
        g = m.grad.copy()
    model.zero_grad()
    return g


@dataclass
class EquivalenceReport:
    max_rel_error: dict          # scheme -> worst per-parameter relative error vs bptt
    peak_retained_bytes: dict
    recompute_count: dict
    losses: dict

    @property
    def ok(self):
        return all(v < EQUIV_TOL for v in self.max_rel_error.values())


def scheme_equivalence(cfg: ModelConfig = None, T_steps: int = 4, batch: int = 3, seed: int = 0,
                       boundary_at: int = None) -> EquivalenceReport:
    """Run every scheme on one rollout from identical weights and compare gradients."""
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    segs = toy_segments(cfg, T_steps + 1, batch, rng)
    flags = [False] * (T_steps + 1)
    if boundary_at is not None:
        flags[boundary_at] = True
    rollout = Rollout(segs, flags)
    grads, peaks, counts, losses = {}, {}, {}, {}
    for name, fn in SCHEMES.items():
        model = Memformer(cfg)
        with T.no_grad():
            mem0 = model.init_memory(batch).detached()
        with T.fresh_tape():
            res = fn(model, rollout, [mem0])
        grads[name] = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                       for k, p in model.params.items()}
        peaks[name] = res.accounting.peak_retained_bytes
        counts[name] = res.accounting.recompute_count
        losses[name] = res.loss
    ref = grads["bptt"]
    errs = {name: max(_rel(grads[name][k], ref[k]) for k in ref)
            for name in SCHEMES if name != "bptt"}
    return EquivalenceReport(errs, peaks, counts, losses)
