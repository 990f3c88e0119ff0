import math

import numpy as np
import pytest

from memformer import tensor as T
from memformer.attention import (AttentionParams, causal_mask, memory_read,
                                 multi_head_attention)
from memformer.memory import MemoryState
from memformer.tensor import DimensionError, Tensor


def params(D=8, H=2, seed=0, std=0.5, output=True):
    return AttentionParams.init(D, H, np.random.default_rng(seed), std, output=output)


def test_single_key_returns_value_projection():
    p = params()
    rng = np.random.default_rng(1)
    q, kv = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 1, 8))
    out = multi_head_attention(q, kv, p).data
    expect = (kv @ p.W_V.data) @ p.W_O.data
    assert np.allclose(out, np.broadcast_to(expect, out.shape))


def test_duplicate_keys_do_not_change_output():
    p = params()
    rng = np.random.default_rng(2)
    q, kv = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 4, 8))
    a = multi_head_attention(q, kv, p).data
    b = multi_head_attention(q, np.concatenate([kv, kv], axis=1), p).data
    assert np.allclose(a, b, atol=1e-12)


def _reference(q_in, kv_in, p, mask=None):
    """Loop-over-heads, loop-over-batch reference."""
    H, d = p.n_heads, p.head_dim
    Q, K, V = q_in @ p.W_Q.data, kv_in @ p.W_K.data, kv_in @ p.W_V.data
    out = np.zeros_like(Q)
    for b in range(q_in.shape[0]):
        for h in range(H):
            sl = slice(h * d, (h + 1) * d)
            s = Q[b, :, sl] @ K[b, :, sl].T / math.sqrt(d)
            if mask is not None:
                s = np.where(mask, s, -np.inf)
            w = np.exp(s - s.max(-1, keepdims=True))
            w /= w.sum(-1, keepdims=True)
            out[b, :, sl] = w @ V[b, :, sl]
    return out @ p.W_O.data


def test_matches_reference_implementation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8))
    p = params()
    assert np.abs(multi_head_attention(x, x, p).data - _reference(x, x, p)).max() < 1e-6
    m = causal_mask(3)
    assert np.abs(multi_head_attention(x, x, p, mask=m).data - _reference(x, x, p, m)).max() < 1e-6
    p1 = params(H=1)
    assert np.abs(multi_head_attention(x, x, p1).data - _reference(x, x, p1)).max() < 1e-6


def test_mask_shape_error():
    x = np.zeros((1, 3, 8))
    with pytest.raises(DimensionError):
        multi_head_attention(x, x, params(), mask=np.ones((2, 3), dtype=bool))


def test_causal_mask():
    assert causal_mask(1).tolist() == [[True]]
    m = causal_mask(3)
    assert np.array_equal(m, np.tril(np.ones((3, 3), dtype=bool)))
    assert [int(r.sum()) for r in m] == [1, 2, 3]


def test_weights_sum_to_one_and_permutation_invariance():
    rng = np.random.default_rng(4)
    q, kv = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8))
    p = params()
    out, w = multi_head_attention(q, kv, p, return_weights=True)
    assert np.allclose(w.data.sum(-1), 1.0)
    perm = rng.permutation(5)
    assert np.allclose(multi_head_attention(q, kv[:, perm], p).data, out.data, atol=1e-12)


def test_memory_read_cases():
    rng = np.random.default_rng(5)
    p = params()
    x = rng.normal(size=(2, 4, 8))
    one = rng.normal(size=(2, 1, 8))
    out = memory_read(x, MemoryState(Tensor(one)), p).data
    assert np.allclose(out, np.broadcast_to((one @ p.W_V.data) @ p.W_O.data, out.shape))

    slots = rng.normal(size=(2, 5, 8))
    a = memory_read(x, MemoryState(Tensor(slots)), p).data
    b = memory_read(x, MemoryState(Tensor(slots[:, rng.permutation(5)])), p).data
    assert np.allclose(a, b, atol=1e-12)

    p.W_Q.data[...] = 0.0
    avg = ((slots @ p.W_V.data).mean(axis=1, keepdims=True)) @ p.W_O.data
    c = memory_read(x, MemoryState(Tensor(slots)), p).data
    assert np.allclose(c, np.broadcast_to(avg, c.shape))


def test_memory_read_errors():
    p = params()
    with pytest.raises(DimensionError):
        memory_read(np.zeros((2, 3, 8)), MemoryState(Tensor(np.zeros((3, 4, 8)))), p)
    with pytest.raises(DimensionError):
        memory_read(np.zeros((2, 3, 8)), MemoryState(Tensor(np.zeros((2, 4, 6)))), p)


def test_memory_read_gradient_reaches_slots():
    rng = np.random.default_rng(6)
    p = params()
    with T.fresh_tape():
        slots = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
        out = memory_read(rng.normal(size=(2, 3, 8)), MemoryState(slots), p)
        T.backward(T.sum_(T.multiply(out, rng.normal(size=out.shape))))
        assert np.linalg.norm(slots.grad) > 0


def test_head_width_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        AttentionParams.init(10, 3, rng)
