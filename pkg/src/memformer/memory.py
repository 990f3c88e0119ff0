"""External slot memory: initial state, slot-attention writer, biased normalisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import NEG_INF, AttentionParams, merge_heads, split_heads
from .tensor import DimensionError, ParameterError, Tensor

SELF_FOCUSED = "self-focused"
MIXED = "mixed"
INPUT_FOCUSED = "input-focused"


@dataclass
class MemoryState:
    slots: Tensor  # [B, k, D]
    step: int = 0

    @property
    def batch(self):
        return self.slots.shape[0]

    @property
    def n_slots(self):
        return self.slots.shape[1]

    @property
    def nbytes(self):
        return self.slots.data.nbytes

    def detached(self, requires_grad=False) -> "MemoryState":
        return MemoryState(Tensor(self.slots.data.copy(), requires_grad=requires_grad), self.step)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.slots.data, axis=-1)


@dataclass
class ForgetBias:
    v_bias: Tensor  # [k, D], one forgetting direction per slot

    @classmethod
    def init(cls, n_slots, dim, rng, norm_scale=0.5, dtype=np.float64):
        # expected norm of each bias vector is ~norm_scale regardless of width
        data = rng.normal(0.0, norm_scale / math.sqrt(dim), (n_slots, dim)).astype(dtype)
        return cls(T.parameter(data, "v_bias"))


@dataclass
class SlotWriteRecord:
    self_mass: np.ndarray    # [B, k], head-averaged attention on the slot itself
    token_mass: np.ndarray   # [B, k, L], head-averaged attention on each input position
    categories: list = field(default_factory=list)

    def mean_self_mass(self) -> np.ndarray:
        return self.self_mass.mean(axis=0)


def init_memory(batch: int, bias: ForgetBias) -> MemoryState:
    """Every sample starts at v_bias / ||v_bias|| (gradient flows into v_bias)."""
    if batch < 1:
        raise ValueError("init_memory needs batch >= 1")
    unit = T.l2_normalize(bias.v_bias)
    slots = T.add(np.zeros((batch, 1, 1), dtype=unit.dtype), unit)
    return MemoryState(slots, 0)


def memory_write(memory: MemoryState, enc_out: Tensor, params: AttentionParams, tau: float,
                 key_mask=None):
    """Per-slot attention over [own slot ; encoder outputs].

    The slot's own value is its raw vector, so a slot that puts all its mass on
    itself is carried over unchanged.  Slots never see each other.
    Returns the pre-normalisation next slots and a :class:`SlotWriteRecord`.
    """
    if not tau > 0:
        raise ParameterError(f"writer temperature must be positive, got {tau}")
    m = memory.slots
    B, k, D = m.shape
    Bx, L, Dx = enc_out.shape
    if Bx != B or Dx != D:
        raise DimensionError(f"memory_write: memory {m.shape} vs encoder output {enc_out.shape}")
    H, hd = params.n_heads, params.head_dim

    q = split_heads(T.linear(m, params.W_Q), H)                   # [B,H,k,hd]
    k_self = split_heads(T.linear(m, params.W_K), H)              # [B,H,k,hd]
    k_tok = split_heads(T.linear(enc_out, params.W_K), H, True)   # [B,H,hd,L]
    v_tok = split_heads(T.linear(enc_out, params.W_V), H)         # [B,H,L,hd]
    v_self = split_heads(m, H)                                    # raw slot, per head

    s_self = T.sum_(T.multiply(q, k_self), axis=-1, keepdims=True)
    s_tok = T.matmul(q, k_tok)
    scores = T.scale(T.concat([s_self, s_tok], axis=-1), 1.0 / math.sqrt(hd))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (B, L):
            raise DimensionError(f"memory_write: key mask {km.shape} != ({B}, {L})")
        bias = np.where(km, 0.0, NEG_INF).astype(m.dtype)
        bias = np.concatenate([np.zeros((B, 1), dtype=m.dtype), bias], axis=1)
        scores = T.add_mask(scores, bias[:, None, None, :])
    w = T.softmax_t(scores, tau, axis=-1)                          # [B,H,k,1+L]

    w_self = T.slice_(w, (Ellipsis, slice(0, 1)))
    w_tok = T.slice_(w, (Ellipsis, slice(1, None)))
    mixed = T.add(T.multiply(w_self, v_self), T.matmul(w_tok, v_tok))
    raw_next = merge_heads(mixed)

    wd = w.data.mean(axis=1)
    record = SlotWriteRecord(self_mass=wd[..., 0].copy(), token_mass=wd[..., 1:].copy())
    return raw_next, record


def bmn(raw_next: Tensor, bias: ForgetBias, step: int = 0, forget: bool = True) -> MemoryState:
    """Add each slot's forgetting bias, then project back to the unit sphere.

    ``forget=False`` keeps the normalisation but drops the bias (ablation).
    """
    if raw_next.shape[1:] != bias.v_bias.shape:
        raise DimensionError(f"bmn: slots {raw_next.shape} vs v_bias {bias.v_bias.shape}")
    x = T.add(raw_next, bias.v_bias) if forget else raw_next
    return MemoryState(T.l2_normalize(x), step + 1)


def classify_slots(record_or_mass, self_threshold_hi: float = 0.8, self_threshold_lo: float = 0.2):
    if not 0.0 <= self_threshold_lo < self_threshold_hi <= 1.0:
        raise ValueError("need 0 <= lo < hi <= 1")
    mass = record_or_mass.self_mass if isinstance(record_or_mass, SlotWriteRecord) else record_or_mass
    mass = np.asarray(mass, dtype=float)
    out = np.full(mass.shape, MIXED, dtype=object)
    out[mass >= self_threshold_hi] = SELF_FOCUSED
    out[mass <= self_threshold_lo] = INPUT_FOCUSED
    return out.tolist() if out.ndim else str(out)


def slot_write_stats(record: SlotWriteRecord, step: int, hi=0.8, lo=0.2, top=3) -> list[dict]:
    """Batch-averaged per-slot rows: {step, slot_index, self_mass, category, top_token_positions}."""
    self_mass = record.self_mass.mean(axis=0)
    tok = record.token_mass.mean(axis=0)
    cats = classify_slots(self_mass, hi, lo)
    rows = []
    for i, (s, c) in enumerate(zip(self_mass, cats)):
        order = np.argsort(-tok[i], kind="stable")[:top]
        rows.append({"step": int(step), "slot_index": i, "self_mass": float(s),
                     "category": c, "top_token_positions": [int(p) for p in order]})
    return rows
