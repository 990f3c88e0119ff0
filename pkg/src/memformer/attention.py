"""Multi-head attention, masks, and cross-attention reads from the memory bank."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

NEG_INF = -1e30


@dataclass
class AttentionParams:
    n_heads: int
    head_dim: int
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Optional[Tensor] = None

    def __post_init__(self):
        width = self.n_heads * self.head_dim
        for name in ("W_Q", "W_K", "W_V"):
            w = getattr(self, name)
            if w.shape[1] != width:
                raise DimensionError(f"{name} has {w.shape[1]} outputs, expected n_heads*head_dim={width}")
        if self.W_O is not None and self.W_O.shape[0] != width:
            raise DimensionError(f"W_O has {self.W_O.shape[0]} inputs, expected {width}")

    @property
    def model_dim(self):
        return self.W_Q.shape[0]

    def parameters(self):
        return [w for w in (self.W_Q, self.W_K, self.W_V, self.W_O) if w is not None]

    @classmethod
    def init(cls, model_dim, n_heads, rng, std=0.02, dtype=np.float64, output=True, name=""):
        if model_dim % n_heads:
            raise DimensionError(f"model_dim {model_dim} not divisible by n_heads {n_heads}")
        hd = model_dim // n_heads

        def w(tag):
            return T.parameter(rng.normal(0.0, std, (model_dim, model_dim)).astype(dtype), f"{name}{tag}")

        return cls(n_heads, hd, w("W_Q"), w("W_K"), w("W_V"), w("W_O") if output else None)


def causal_mask(n: int) -> np.ndarray:
    """mask[i, j] is True where query i may attend key j (j <= i)."""
    if n < 1:
        raise ValueError("causal_mask needs n >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def additive_mask(mask=None, key_mask=None, dtype=np.float64):
    """Combine a [Lq, Lk] mask and a [B, Lk] key mask into a [B|1, 1, Lq|1, Lk] bias."""
    bias = None
    if mask is not None:
        bias = np.where(np.asarray(mask), 0.0, NEG_INF).astype(dtype)[None, None]
    if key_mask is not None:
        kb = np.where(np.asarray(key_mask), 0.0, NEG_INF).astype(dtype)[:, None, None, :]
        bias = kb if bias is None else bias + kb
    return bias


def split_heads(x: Tensor, n_heads: int, key_side=False) -> Tensor:
    """[B, L, H*d] -> [B, H, L, d] (or [B, H, d, L] when ``key_side``)."""
    B, L, D = x.shape
    x = x.reshape(B, L, n_heads, D // n_heads)
    return x.transpose(0, 2, 3, 1) if key_side else x.transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, H, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * d)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams, mask=None,
                         tau: float = 1.0, key_mask=None, return_weights=False):
    """Scaled dot-product attention over ``params.n_heads`` heads.

    ``mask`` is [Lq, Lk] and ``key_mask`` is [B, Lk]; True means attend.
    """
    B, Lq, D = q_in.shape
    Bk, Lk, Dk = kv_in.shape
    if Bk != B or Dk != D or D != params.model_dim:
        raise DimensionError(f"attention: query {q_in.shape} vs key/value {kv_in.shape} "
                             f"(model_dim {params.model_dim})")
    if mask is not None and np.shape(mask) != (Lq, Lk):
        raise DimensionError(f"attention mask shape {np.shape(mask)} != ({Lq}, {Lk})")
    if key_mask is not None and np.shape(key_mask) != (B, Lk):
        raise DimensionError(f"key mask shape {np.shape(key_mask)} != ({B}, {Lk})")
    H = params.n_heads
    q = split_heads(T.linear(q_in, params.W_Q), H)
    k = split_heads(T.linear(kv_in, params.W_K), H, key_side=True)
    v = split_heads(T.linear(kv_in, params.W_V), H)
    scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(params.head_dim))
    bias = additive_mask(mask, key_mask, q_in.dtype)
    if bias is not None:
        scores = T.add_mask(scores, bias)
    weights = T.softmax_t(scores, tau, axis=-1)
    out = merge_heads(T.matmul(weights, v))
    if params.W_O is not None:
        out = T.linear(out, params.W_O)
    return (out, weights) if return_weights else out


def memory_read(x: Tensor, memory, params: AttentionParams) -> Tensor:
    """Queries from ``x`` attend over every memory slot (no mask, tau = 1)."""
    slots = memory.slots
    if slots.shape[0] != x.shape[0] or slots.shape[2] != x.shape[2]:
        raise DimensionError(f"memory_read: input {x.shape} vs memory slots {slots.shape}")
    return multi_head_attention(x, slots, params)
