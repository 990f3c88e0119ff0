"""Encoder-decoder with per-layer memory reads and a last-layer memory writer."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, causal_mask, memory_read, multi_head_attention
from .memory import ForgetBias, MemoryState, bmn, init_memory, memory_write
from .tensor import CounterRNG, DimensionError, Tensor

PAD_ID = 0
BOS_ID = 1


@dataclass
class ModelConfig:
    vocab_size: int = 256
    model_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    memory_slots: int = 8
    n_cls_tokens: int = 4
    tau: float = 0.25
    dropout_rate: float = 0.0
    max_segment_len: int = 16
    no_memory: bool = False
    no_forgetting: bool = False
    no_multihead_writer: bool = False
    tau_override: Optional[float] = None
    init_std: float = 0.02
    vbias_norm: float = 0.5
    bos_id: int = BOS_ID
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} must equal n_heads x head_dim "
                             f"(n_heads={self.n_heads})")
        counts = ("vocab_size", "model_dim", "n_heads", "ffn_dim", "n_encoder_layers",
                  "n_decoder_layers", "max_segment_len")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_cls_tokens < 0:
            raise ValueError("n_cls_tokens must be >= 0")
        if self.memory_slots < 1 and not self.no_memory:
            raise ValueError("memory_slots may be 0 only with no_memory")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def head_dim(self):
        return self.model_dim // self.n_heads

    @property
    def writer_tau(self):
        return self.tau if self.tau_override is None else self.tau_override

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SegmentBatch:
    tokens: np.ndarray               # [B, L] int
    lengths: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise DimensionError(f"segment tokens must be [B, L], got {self.tokens.shape}")
        if self.lengths is None:
            self.lengths = np.full(self.tokens.shape[0], self.tokens.shape[1], dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)

    @property
    def batch(self):
        return self.tokens.shape[0]

    @property
    def length(self):
        return self.tokens.shape[1]

    @property
    def pad_mask(self) -> np.ndarray:
        """True at real (non-padding) positions."""
        return np.arange(self.length)[None, :] < self.lengths[:, None]


def sinusoidal_positions(n, d, dtype=np.float64):
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


def shift_right(tokens: np.ndarray, bos: int = BOS_ID) -> np.ndarray:
    out = np.empty_like(tokens)
    out[:, 0] = bos
    out[:, 1:] = tokens[:, :-1]
    return out


class Memformer:
    """Weights plus the forward passes.  Parameters are tape leaves."""

    def __init__(self, config: ModelConfig):
        self.config = c = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(c.seed)
        dt = c.np_dtype
        D, F = c.model_dim, c.ffn_dim

        def p(name, arr):
            t = T.parameter(np.asarray(arr, dtype=dt), name)
            self.params[name] = t
            return t

        def normal(*shape, std=c.init_std):
            return rng.normal(0.0, std, shape)

        def attn(prefix, heads=c.n_heads, output=True):
            ap = AttentionParams.init(D, heads, rng, c.init_std, dt, output)
            for tag in ("W_Q", "W_K", "W_V", "W_O"):
                w = getattr(ap, tag)
                if w is not None:
                    w.name = f"{prefix}.{tag}"
                    self.params[w.name] = w
            return ap

        def ln(prefix):
            return p(f"{prefix}.gamma", np.ones(D)), p(f"{prefix}.beta", np.zeros(D))

        def ffn(prefix):
            return (p(f"{prefix}.W1", normal(D, F)), p(f"{prefix}.b1", np.zeros(F)),
                    p(f"{prefix}.W2", normal(F, D)), p(f"{prefix}.b2", np.zeros(D)))

        self.tok_emb = p("tok_emb", normal(c.vocab_size, D, std=1.0))
        self.cls_emb = p("cls_emb", normal(c.n_cls_tokens, D, std=1.0)) if c.n_cls_tokens else None
        self.enc_layers = []
        for i in range(c.n_encoder_layers):
            pre = f"enc.{i}"
            layer = {"self": attn(f"{pre}.self_attn"), "ln1": ln(f"{pre}.ln1"),
                     "ffn": ffn(f"{pre}.ffn"), "ln3": ln(f"{pre}.ln3")}
            if not c.no_memory:
                layer["read"] = attn(f"{pre}.mem_read")
                layer["ln2"] = ln(f"{pre}.ln2")
            self.enc_layers.append(layer)
        self.dec_layers = []
        for i in range(c.n_decoder_layers):
            pre = f"dec.{i}"
            self.dec_layers.append({
                "self": attn(f"{pre}.self_attn"), "ln1": ln(f"{pre}.ln1"),
                "cross": attn(f"{pre}.cross_attn"), "ln2": ln(f"{pre}.ln2"),
                "ffn": ffn(f"{pre}.ffn"), "ln3": ln(f"{pre}.ln3"),
            })
        self.W_out = p("out.W", normal(D, c.vocab_size))
        self.b_out = p("out.b", np.zeros(c.vocab_size))
        self.writer = None
        if not c.no_memory:
            self.writer = attn("writer", heads=1 if c.no_multihead_writer else c.n_heads, output=False)
        # per-slot forgetting directions, expected norm ~vbias_norm
        k = max(c.memory_slots, 1)
        self.bias = ForgetBias(p("v_bias", rng.normal(0.0, c.vbias_norm / math.sqrt(D), (k, D))))
        self._pos = sinusoidal_positions(max(c.max_segment_len, 1), D, dt)
        self.last_write_record = None
        self.training = False

    # ------------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def init_memory(self, batch: int) -> MemoryState:
        return init_memory(batch, self.bias)

    # ------------------------------------------------------------------
    def _drop(self, x, rng):
        return T.dropout(x, self.config.dropout_rate, rng, self.training)

    def _embed(self, tokens, rng):
        L = tokens.shape[1]
        if L > self._pos.shape[0]:
            raise DimensionError(f"segment length {L} exceeds max_segment_len {self._pos.shape[0]}")
        x = T.add_mask(T.embedding(self.tok_emb, tokens), self._pos[:L])
        return self._drop(x, rng)

    @staticmethod
    def _ffn(x, w):
        W1, b1, W2, b2 = w
        return T.linear(T.gelu(T.linear(x, W1, b1)), W2, b2)

    def _sublayer(self, x, y, ln, rng):
        return T.layer_norm(T.add(x, self._drop(y, rng)), *ln)

    def encode(self, segment: SegmentBatch, memory_prev: MemoryState, rng: CounterRNG = None):
        """Returns (enc_hidden [B, L+n_cls, D], memory_next)."""
        c = self.config
        B = segment.batch
        if memory_prev is not None and memory_prev.batch != B:
            raise DimensionError(f"encode: memory batch {memory_prev.batch} != segment batch {B}")
        x = self._embed(segment.tokens, rng)
        key_mask = segment.pad_mask
        if c.n_cls_tokens:
            cls = T.add(np.zeros((B, 1, 1), dtype=x.dtype), self.cls_emb)
            x = T.concat([x, cls], axis=1)
            key_mask = np.concatenate([key_mask, np.ones((B, c.n_cls_tokens), dtype=bool)], axis=1)
        use_mem = not c.no_memory
        for layer in self.enc_layers:
            x = self._sublayer(x, multi_head_attention(x, x, layer["self"], key_mask=key_mask),
                               layer["ln1"], rng)
            if use_mem:
                x = self._sublayer(x, memory_read(x, memory_prev, layer["read"]), layer["ln2"], rng)
            x = self._sublayer(x, self._ffn(x, layer["ffn"]), layer["ln3"], rng)
        self._enc_key_mask = key_mask
        if not use_mem:
            self.last_write_record = None
            return x, memory_prev
        raw, record = memory_write(memory_prev, x, self.writer, c.writer_tau, key_mask)
        self.last_write_record = record
        memory_next = bmn(raw, self.bias, memory_prev.step, forget=not c.no_forgetting)
        return x, memory_next

    def encoder_key_mask(self, segment: SegmentBatch) -> np.ndarray:
        B = segment.batch
        return np.concatenate([segment.pad_mask, np.ones((B, self.config.n_cls_tokens), dtype=bool)],
                              axis=1)

    def decode(self, prefix_tokens: np.ndarray, enc_hidden: Tensor, enc_key_mask=None,
               rng: CounterRNG = None) -> Tensor:
        """Logits [B, L, vocab] for a right-shifted prefix."""
        prefix_tokens = np.asarray(prefix_tokens)
        y = self._embed(prefix_tokens, rng)
        causal = causal_mask(prefix_tokens.shape[1])
        for layer in self.dec_layers:
            y = self._sublayer(y, multi_head_attention(y, y, layer["self"], mask=causal),
                               layer["ln1"], rng)
            y = self._sublayer(y, multi_head_attention(y, enc_hidden, layer["cross"], key_mask=enc_key_mask),
                               layer["ln2"], rng)
            y = self._sublayer(y, self._ffn(y, layer["ffn"]), layer["ln3"], rng)
        return T.linear(y, self.W_out, self.b_out)

    def segment_step(self, current: SegmentBatch, next_target: SegmentBatch,
                     memory_prev: MemoryState, rng: CounterRNG = None):
        """Encode ``current`` with memory, predict ``next_target``.

        Returns (loss, memory_next, metrics) where loss is the token-mean
        cross-entropy over non-padding target positions.
        """
        # separate mask streams so the decoder can be replayed on its own
        enc_rng = rng.fork(0) if rng is not None else None
        dec_rng = rng.fork(1) if rng is not None else None
        enc, mem_next = self.encode(current, memory_prev, enc_rng)
        prefix = shift_right(next_target.tokens, self.config.bos_id)
        logits = self.decode(prefix, enc, self._enc_key_mask, dec_rng)
        mask = next_target.pad_mask
        loss = T.cross_entropy(logits, next_target.tokens, mask)
        pred = logits.data.argmax(axis=-1)
        n = int(mask.sum())
        correct = int(((pred == next_target.tokens) & mask).sum())
        lv = float(loss.data)
        metrics = {"loss": lv, "ppl": math.exp(min(lv, 700.0)), "accuracy": correct / max(n, 1),
                   "n_tokens": n, "predictions": pred}
        return loss, mem_next, metrics

    # ------------------------------------------------------------------
    def generate(self, prompt_segments, n_segments: int, sampling="greedy", rng=None,
                 on_segment: Callable = None) -> np.ndarray:
        """Roll memory through the prompt, then emit ``n_segments`` new segments.

        ``sampling`` is "greedy" or a positive sampling temperature.  Returns the
        prompt tokens followed by the generated ones, [B, total_len].
        """
        if not prompt_segments:
            raise ValueError("generate needs at least one prompt segment")
        if n_segments < 0:
            raise ValueError("n_segments must be >= 0")
        c = self.config
        was_training, self.training = self.training, False
        rng = rng or np.random.default_rng(c.seed)
        pieces = [np.asarray(s.tokens) for s in prompt_segments]
        B = pieces[0].shape[0]
        L = c.max_segment_len
        with T.no_grad():
            memory = self.init_memory(B)
            for seg in prompt_segments:
                enc, memory = self.encode(seg, memory)
            key_mask = self._enc_key_mask
            for s in range(n_segments):
                out = np.full((B, L), PAD_ID, dtype=np.int64)
                for j in range(L):
                    prefix = shift_right(out, c.bos_id)[:, : j + 1]
                    logits = self.decode(prefix, enc, key_mask).data[:, j]
                    out[:, j] = _pick(logits, sampling, rng)
                pieces.append(out)
                seg = SegmentBatch(out)
                enc, memory = self.encode(seg, memory)
                key_mask = self._enc_key_mask
                if on_segment is not None:
                    on_segment(s, memory)
        self.training = was_training
        return np.concatenate(pieces, axis=1)


def _pick(logits, sampling, rng):
    if sampling == "greedy" or sampling is None:
        return logits.argmax(axis=-1)
    temp = float(sampling)
    if temp <= 0:
        return logits.argmax(axis=-1)
    z = logits / temp
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return np.array([rng.choice(len(row), p=row) for row in p])


# ---------------------------------------------------------------------------
# checkpoint file: "MEMF" | u32 version | u32 len | config json | u32 count |
#   per parameter: u16 len | name | u8 ndim | u32 dims... | f32 LE values

MAGIC = b"MEMF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Memformer, path):
    cfg = model.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, expected: ModelConfig = None, dtype: str = None) -> Memformer:
    """Rebuild a model; raises CheckpointError on bad magic or config mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(blob[off:off + n].decode("utf-8")))
    off += n
    if expected is not None:
        a, b = asdict(cfg), asdict(expected)
        diff = [k for k in a if k not in ("dtype", "seed") and a[k] != b[k]]
        if diff:
            raise CheckpointError(f"{path}: config mismatch on {', '.join(diff)}")
    if dtype is not None:
        cfg.dtype = dtype
    model = Memformer(cfg)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    seen = set()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name}{tuple(shape)} does not match the config")
        model.params[name].data[...] = values
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return model
