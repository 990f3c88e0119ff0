"""Token streams: synthetic associative recall, char-level corpora, small images."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import PAD_ID, SegmentBatch
from ..training import Rollout


@dataclass
class TaskSpec:
    task: str = "recall"            # recall | image_seq | char_lm
    segment_len: int = 16
    stream_len: int = 600           # segments per lane
    batch: int = 16                 # parallel lanes
    seed: int = 0
    # recall
    n_pairs: int = 4
    n_keys: int = 8
    n_values: int = 8
    distance: int = 4
    min_distance: Optional[int] = None
    keyed_values: bool = True       # each key has its own value alphabet
    # image_seq
    image_size: int = 10
    bit_depth: int = 4
    image_dir: Optional[str] = None
    # char_lm
    corpus_path: Optional[str] = None

    def validate(self):
        if self.task not in ("recall", "image_seq", "char_lm"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class TokenStream:
    """Lane-parallel stream of segments.

    tokens/lengths are [B, n_seg, L] / [B, n_seg]; ``boundaries[i]`` marks the
    first segment of a document in every lane, or per lane when boundaries is
    [B, n_seg].  ``scored`` flags the positions a task-specific accuracy is
    computed on.
    """
    tokens: np.ndarray
    lengths: np.ndarray
    boundaries: np.ndarray
    vocab_size: int
    scored: Optional[np.ndarray] = None

    @property
    def n_segments(self):
        return self.tokens.shape[1]

    @property
    def batch(self):
        return self.tokens.shape[0]

    def segment(self, i) -> SegmentBatch:
        return SegmentBatch(self.tokens[:, i], self.lengths[:, i])

    def rollout(self, start: int, T: int) -> Rollout:
        if start + T >= self.n_segments:
            raise IndexError("rollout runs past the end of the stream")
        segs = [self.segment(i) for i in range(start, start + T + 1)]
        if self.boundaries.ndim == 1:
            flags = [bool(b) for b in self.boundaries[start:start + T + 1]]
        else:
            flags = [self.boundaries[:, i].copy() for i in range(start, start + T + 1)]
        return Rollout(segs, flags)


# ---------------------------------------------------------------------------
# associative recall


class RecallVocab:
    """Token ids: specials, then keys, then values.

    With ``keyed_values`` every key owns a block of ``n_values`` value tokens
    (value ``v`` of key ``k`` is ``value0 + k * n_values + v``); otherwise all
    keys share one block of ``n_values`` tokens.
    """
    PAD, BOS, FILL, QUERY = 0, 1, 2, 3
    N_SPECIAL = 4

    def __init__(self, n_keys, n_values, keyed_values=False):
        self.n_keys, self.n_values, self.keyed_values = n_keys, n_values, keyed_values
        self.key0 = self.N_SPECIAL
        self.value0 = self.key0 + n_keys
        self.size = self.value0 + n_values * (n_keys if keyed_values else 1)

    def value_token(self, key_index, value_index):
        key_index = np.asarray(key_index)
        block = key_index * self.n_values if self.keyed_values else 0
        return self.value0 + block + np.asarray(value_index)

    def value_index(self, token):
        return (np.asarray(token) - self.value0) % self.n_values


def make_recall_task(spec: TaskSpec, seed: int = None) -> TokenStream:
    """Documents of ``d + 2`` segments.

    segment 0 holds ``n_pairs`` key/value pairs; segment ``d`` ends with a
    QUERY marker and the keys again (shuffled); the next segment opens with
    the matching values, which are the scored answer tokens.  Segments in
    between are FILL.  Value indices are drawn uniformly and independently of
    keys, so without memory the answer accuracy is 1/n_values.  With d = 0
    the pairs and the query share one segment.

    With ``spec.keyed_values`` the value token also names its key (see
    :class:`RecallVocab`), so recalling an answer means finding the stored
    value of the queried key rather than re-binding anonymous values.

    ``d`` is ``spec.distance``, or, when ``spec.min_distance`` is set, drawn
    per document from [min_distance, distance] (the same for every lane).
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    voc = RecallVocab(spec.n_keys, spec.n_values, spec.keyed_values)
    L, n = spec.segment_len, spec.n_pairs
    d_hi = spec.distance
    d_lo = d_hi if spec.min_distance is None else spec.min_distance
    if not 0 <= d_lo <= d_hi:
        raise ValueError("need 0 <= min_distance <= distance")
    if n > spec.n_keys:
        raise ValueError("n_pairs cannot exceed n_keys (keys are distinct)")
    if d_lo == 0 and 3 * n + 1 > L:
        raise ValueError("segment too short for pairs + query in one segment")
    if 2 * n > L or n + 1 > L:
        raise ValueError("segment too short for the pairs")
    dists = []
    total = 0
    while True:
        d = int(rng.integers(d_lo, d_hi + 1)) if d_hi > d_lo else d_hi
        if total + d + 2 > spec.stream_len and dists:
            break
        dists.append(d)
        total += d + 2
    B = spec.batch
    tokens = np.full((B, total, L), voc.FILL, dtype=np.int64)
    scored = np.zeros((B, total, L), dtype=bool)
    boundaries = np.zeros(total, dtype=bool)
    base = 0
    for d in dists:
        key_idx = np.argsort(rng.random((B, spec.n_keys)), axis=1)[:, :n]
        keys = key_idx + voc.key0
        values = voc.value_token(key_idx, rng.integers(0, spec.n_values, (B, n)))
        order = np.argsort(rng.random((B, n)), axis=1)
        q_keys = np.take_along_axis(keys, order, axis=1)
        q_vals = np.take_along_axis(values, order, axis=1)
        tokens[:, base, 0:2 * n:2] = keys
        tokens[:, base, 1:2 * n:2] = values
        qs = base + d
        tokens[:, qs, L - n - 1] = voc.QUERY
        tokens[:, qs, L - n:] = q_keys
        tokens[:, qs + 1, :n] = q_vals
        scored[:, qs + 1, :n] = True
        boundaries[base] = True
        base += d + 2
    lengths = np.full((B, total), L, dtype=np.int64)
    return TokenStream(tokens, lengths, boundaries, voc.size, scored)


# ---------------------------------------------------------------------------
# char-level corpus

CHAR_SPECIALS = 4  # PAD, BOS, UNK, EOD
CHAR_UNK = 2


def char_vocab_size():
    return 256 + CHAR_SPECIALS


def tokenize(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64) + CHAR_SPECIALS


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    ids = ids[ids >= CHAR_SPECIALS] - CHAR_SPECIALS
    return bytes(ids.astype(np.uint8).tolist())


def load_char_corpus(path, segment_len: int, batch: int = 1) -> TokenStream:
    """Byte-level segmentation; documents are separated by blank lines.

    Each document starts on a fresh segment (boundary flag set) and its last
    segment is padded.  With ``batch`` > 1 the segment list is cut into
    ``batch`` contiguous lanes.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror}") from exc
    docs = _split_documents(raw)
    segs, lens, flags = [], [], []
    for doc in docs:
        ids = tokenize(doc)
        for j, lo in enumerate(range(0, max(len(ids), 1), segment_len)):
            chunk = ids[lo:lo + segment_len]
            seg = np.full(segment_len, PAD_ID, dtype=np.int64)
            seg[:len(chunk)] = chunk
            segs.append(seg)
            lens.append(len(chunk))
            flags.append(j == 0)
    n = len(segs) // batch
    if n == 0:
        raise ValueError(f"corpus {path} too small for batch {batch}")
    tokens = np.stack(segs[:n * batch]).reshape(batch, n, segment_len)
    lengths = np.asarray(lens[:n * batch]).reshape(batch, n)
    flags = np.asarray(flags[:n * batch]).reshape(batch, n)
    # lanes start mid-document except lane 0, so each lane opens with a reset
    flags[:, 0] = True
    boundaries = flags[0] if batch == 1 else flags
    return TokenStream(tokens, lengths, boundaries, char_vocab_size())


def _split_documents(raw: bytes) -> list[bytes]:
    text = raw.replace(b"\r\n", b"\n")
    parts = [p for p in text.split(b"\n\n")]
    docs = [p.strip(b"\n") for p in parts]
    return [d for d in docs if d] or [b""]


# ---------------------------------------------------------------------------
# images


class PGMFormatError(ValueError):
    pass


def read_pgm(path) -> np.ndarray:
    """Binary (P5) grayscale PGM with maxval <= 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, off = [], 0
    while len(fields) < 4:
        while off < len(data) and data[off:off + 1].isspace():
            off += 1
        if off < len(data) and data[off:off + 1] == b"#":
            while off < len(data) and data[off:off + 1] not in (b"\n", b"\r"):
                off += 1
            continue
        start = off
        while off < len(data) and not data[off:off + 1].isspace():
            off += 1
        if start == off:
            raise PGMFormatError(f"{path}: truncated header at offset {off}")
        fields.append((data[start:off], start))
    magic, (w, wo), (h, ho), (mx, mo) = fields[0][0], fields[1], fields[2], fields[3]
    if magic != b"P5":
        raise PGMFormatError(f"{path}: bad magic {magic!r} at offset 0")
    try:
        width, height, maxval = int(w), int(h), int(mx)
    except ValueError:
        raise PGMFormatError(f"{path}: non-numeric header field near offset {wo}") from None
    if not 0 < maxval < 256:
        raise PGMFormatError(f"{path}: unsupported maxval {maxval} at offset {mo}")
    off += 1
    pix = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=off) \
        if len(data) - off >= width * height else None
    if pix is None:
        raise PGMFormatError(f"{path}: pixel data truncated at offset {off}")
    img = pix.reshape(height, width).astype(np.int64)
    if maxval != 255:
        img = img * 255 // maxval
    return img


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def quantize(img: np.ndarray, bit_depth: int) -> np.ndarray:
    levels = 1 << bit_depth
    return (np.asarray(img, dtype=np.int64) * levels) // 256


def dequantize(tokens: np.ndarray, bit_depth: int) -> np.ndarray:
    levels = 1 << bit_depth
    return (np.asarray(tokens) * 255 // (levels - 1)).clip(0, 255)


def synthetic_images(n, size, rng) -> list:
    """Random axis-aligned filled rectangles on a black canvas."""
    out = []
    for _ in range(n):
        img = np.zeros((size, size), dtype=np.int64)
        for _ in range(rng.integers(1, 4)):
            y0, x0 = rng.integers(0, size - 1, 2)
            y1 = rng.integers(y0 + 1, size + 1)
            x1 = rng.integers(x0 + 1, size + 1)
            img[y0:y1, x0:x1] = rng.integers(64, 256)
        out.append(img)
    return out


def image_vocab_size(bit_depth):
    return (1 << bit_depth) + 2  # + PAD, BOS offset


IMAGE_OFFSET = 2


def load_image_sequences(spec: TaskSpec, seed: int = None) -> TokenStream:
    """One image per document, rasterised row-major and quantised."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.image_dir:
        names = sorted(f for f in os.listdir(spec.image_dir) if f.lower().endswith(".pgm"))
        images = [read_pgm(os.path.join(spec.image_dir, f)) for f in names]
    else:
        n_img = max(1, spec.stream_len * spec.segment_len // (spec.image_size ** 2))
        images = synthetic_images(n_img * spec.batch, spec.image_size, rng)
    L = spec.segment_len
    docs = [quantize(img, spec.bit_depth).reshape(-1) + IMAGE_OFFSET for img in images]
    per_lane = max(1, len(docs) // spec.batch)
    lanes = [docs[i * per_lane:(i + 1) * per_lane] for i in range(spec.batch)]
    seg_per_doc = -(-len(docs[0]) // L)
    n_seg = per_lane * seg_per_doc
    tokens = np.full((spec.batch, n_seg, L), PAD_ID, dtype=np.int64)
    lengths = np.zeros((spec.batch, n_seg), dtype=np.int64)
    for b, lane in enumerate(lanes):
        for j, doc in enumerate(lane):
            if len(doc) != len(docs[0]):
                raise ValueError("all images in a stream must share one size")
            for s in range(seg_per_doc):
                chunk = doc[s * L:(s + 1) * L]
                tokens[b, j * seg_per_doc + s, :len(chunk)] = chunk
                lengths[b, j * seg_per_doc + s] = len(chunk)
    boundaries = np.zeros(n_seg, dtype=bool)
    boundaries[::seg_per_doc] = True
    return TokenStream(tokens, lengths, boundaries, image_vocab_size(spec.bit_depth))


def image_tokens_to_array(tokens, size, bit_depth):
    vals = np.asarray(tokens)[: size * size] - IMAGE_OFFSET
    return dequantize(vals.clip(0, (1 << bit_depth) - 1), bit_depth).reshape(size, size)
