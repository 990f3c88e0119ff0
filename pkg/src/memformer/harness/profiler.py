"""Closed-form inference cost for vanilla, Transformer-XL and Memformer stacks.

Counts are multiply-accumulates times two.  Only the matrix products are
counted (projections, attention scores, attention-weighted sums, FFN, output
layer); softmax, norms and residual adds are ignored as lower order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

ARCHS = ("vanilla", "transformer_xl", "memformer")
CSV_HEADER = ("arch", "N", "flops", "mem_values")


@dataclass(frozen=True)
class CostModel:
    architecture: str
    model_dim: int = 128
    ffn_dim: int = 256
    n_layers: int = 8            # vanilla / transformer_xl
    n_encoder_layers: int = 4    # memformer
    n_decoder_layers: int = 8    # memformer
    memory_len: int = 784        # transformer_xl cached positions K
    memory_slots: int = 64       # memformer slots k
    segment_len: int = 8
    n_cls_tokens: int = 4
    vocab_size: int = 256

    def __post_init__(self):
        if self.architecture not in ARCHS:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        for name in ("model_dim", "ffn_dim", "n_layers", "n_encoder_layers", "n_decoder_layers",
                     "memory_len", "memory_slots", "segment_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_cls_tokens < 0 or self.vocab_size < 0:
            raise ValueError("n_cls_tokens and vocab_size must be >= 0")


@dataclass(frozen=True)
class Cost:
    flops: int
    mem_values: int


def _attn(n_q, n_kv, D):
    """Q,O on the queries, K,V on the keys, scores and weighted sum."""
    return 4 * n_q * D * D + 4 * n_kv * D * D + 4 * n_q * n_kv * D


def _ffn(n, D, F):
    return 4 * n * D * F


def _vanilla(cm: CostModel, N: int) -> Cost:
    D, F = cm.model_dim, cm.ffn_dim
    per_layer = _attn(N, N, D) + _ffn(N, D, F)
    flops = cm.n_layers * per_layer + 2 * N * D * cm.vocab_size
    return Cost(flops, N * cm.n_layers * D)


def _xl(cm: CostModel, N: int) -> Cost:
    D, F, S, K = cm.model_dim, cm.ffn_dim, cm.segment_len, cm.memory_len
    n_seg = math.ceil(N / S)
    per_seg = cm.n_layers * (_attn(S, S + K, D) + _ffn(S, D, F)) + 2 * S * D * cm.vocab_size
    return Cost(n_seg * per_seg, K * cm.n_layers * D)


def memformer_segment_flops(cm: CostModel) -> int:
    D, F, S, k = cm.model_dim, cm.ffn_dim, cm.segment_len, cm.memory_slots
    Se = S + cm.n_cls_tokens
    enc = cm.n_encoder_layers * (_attn(Se, Se, D) + _attn(Se, k, D) + _ffn(Se, D, F))
    # writer: Q and K for the slots, K and V for the tokens, one self key per slot
    write = 4 * k * D * D + 4 * Se * D * D + 4 * k * (Se + 1) * D
    dec = cm.n_decoder_layers * (_attn(S, S, D) + _attn(S, Se, D) + _ffn(S, D, F))
    return enc + write + dec + 2 * S * D * cm.vocab_size


def _memformer(cm: CostModel, N: int) -> Cost:
    return Cost(math.ceil(N / cm.segment_len) * memformer_segment_flops(cm),
                cm.memory_slots * cm.model_dim)


def flops_model(cm: CostModel, seq_len: int) -> Cost:
    """Total inference cost for a sequence of ``seq_len`` tokens."""
    if seq_len < cm.segment_len:
        raise ValueError(f"seq_len {seq_len} shorter than segment length {cm.segment_len}")
    fn = {"vanilla": _vanilla, "transformer_xl": _xl, "memformer": _memformer}[cm.architecture]
    return fn(cm, int(seq_len))


def table_configs() -> dict:
    """The image-generation comparison: 4+8 Memformer (k=64) vs 8-layer XL (K=784)."""
    return {
        "vanilla": CostModel("vanilla"),
        "transformer_xl": CostModel("transformer_xl"),
        "memformer": CostModel("memformer"),
    }


def loglog_slope(cm: CostModel, lengths) -> float:
    x = np.log(np.asarray(lengths, dtype=float))
    y = np.log([flops_model(cm, n).flops for n in lengths])
    return float(np.polyfit(x, y, 1)[0])


def parse_sweep(text: str) -> list[int]:
    """'128..8192' doubles from 128 up to 8192; '100,200' is an explicit list."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(s) for s in text.split("..", 1))
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad sweep {text!r}")
        out, n = [], lo
        while n <= hi:
            out.append(n)
            n *= 2
        return out
    vals = [int(s) for s in text.split(",") if s.strip()]
    if not vals or min(vals) <= 0:
        raise ValueError(f"bad sweep {text!r}")
    return vals


def sweep_rows(archs, lengths, configs=None) -> list[dict]:
    configs = configs or table_configs()
    rows = []
    for arch in archs:
        for n in lengths:
            c = flops_model(configs[arch], n)
            rows.append({"arch": arch, "N": n, "flops": c.flops, "mem_values": c.mem_values})
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
