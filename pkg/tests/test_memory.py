import numpy as np
import pytest

from memformer import tensor as T
from memformer.attention import AttentionParams
from memformer.memory import (INPUT_FOCUSED, MIXED, SELF_FOCUSED, ForgetBias, MemoryState,
                              SlotWriteRecord, bmn, classify_slots, init_memory, memory_write,
                              slot_write_stats)
from memformer.tensor import ParameterError, Tensor


def bias_of(v):
    return ForgetBias(T.parameter(np.asarray(v, dtype=np.float64)))


def writer(D=8, H=2, seed=0):
    return AttentionParams.init(D, H, np.random.default_rng(seed), 0.5, output=False)


def unit_slots(rng, B, k, D):
    m = rng.normal(size=(B, k, D))
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def test_init_memory_examples():
    mem = init_memory(3, bias_of([[3.0, 4.0], [0.0, 2.0]]))
    assert mem.step == 0 and mem.slots.shape == (3, 2, 2)
    assert np.allclose(mem.slots.data[:, 0], [0.6, 0.8])
    assert np.allclose(mem.slots.data[0], mem.slots.data[2])
    assert np.allclose(np.linalg.norm(mem.slots.data, axis=-1), 1.0)
    with pytest.raises(ValueError):
        init_memory(0, bias_of([[1.0, 0.0]]))


def test_init_memory_gradient_reaches_bias():
    with T.fresh_tape():
        b = bias_of([[3.0, 4.0]])
        mem = init_memory(2, b)
        T.backward(T.sum_(T.multiply(mem.slots, np.array([1.0, -1.0]))))
        assert np.abs(b.v_bias.grad).sum() > 0


def test_self_only_write_is_identity():
    rng = np.random.default_rng(1)
    m = unit_slots(rng, 2, 3, 8)
    enc = rng.normal(size=(2, 5, 8))
    raw, rec = memory_write(MemoryState(Tensor(m)), enc, writer(), 0.25,
                            key_mask=np.zeros((2, 5), dtype=bool))
    assert np.array_equal(raw.data, m)
    assert np.allclose(rec.self_mass, 1.0)


def test_slot_isolation():
    rng = np.random.default_rng(2)
    m = unit_slots(rng, 2, 4, 8)
    enc = rng.normal(size=(2, 6, 8))
    w = writer()
    base, _ = memory_write(MemoryState(Tensor(m)), enc, w, 0.25)
    for j in range(4):
        m2 = m.copy()
        m2[:, j] += rng.normal(size=(2, 8))
        out, _ = memory_write(MemoryState(Tensor(m2)), enc, w, 0.25)
        others = [i for i in range(4) if i != j]
        assert np.abs(out.data[:, others] - base.data[:, others]).max() <= 1e-12


def test_single_slot_single_token_closed_form():
    D = 2
    eye = np.eye(D)
    w = AttentionParams(1, D, T.parameter(eye.copy()), T.parameter(2 * eye), T.parameter(3 * eye))
    m = np.array([[[1.0, 0.0]]])
    x = np.array([[[0.5, 1.0]]])
    raw, rec = memory_write(MemoryState(Tensor(m)), x, w, tau=1.0)
    q = m[0, 0]
    s_self = q @ (2 * m[0, 0]) / np.sqrt(D)
    s_tok = q @ (2 * x[0, 0]) / np.sqrt(D)
    a = np.exp([s_self, s_tok]) / np.exp([s_self, s_tok]).sum()
    expect = a[0] * m[0, 0] + a[1] * (3 * x[0, 0])
    assert np.allclose(raw.data[0, 0], expect)
    assert np.isclose(rec.self_mass[0, 0], a[0])


def test_write_rows_sum_to_one_and_tau_error():
    rng = np.random.default_rng(3)
    m = unit_slots(rng, 2, 3, 8)
    raw, rec = memory_write(MemoryState(Tensor(m)), rng.normal(size=(2, 5, 8)), writer(), 0.5)
    assert np.allclose(rec.self_mass + rec.token_mass.sum(-1), 1.0)
    with pytest.raises(ParameterError):
        memory_write(MemoryState(Tensor(m)), rng.normal(size=(2, 5, 8)), writer(), 0.0)


def test_padded_tokens_get_no_write_mass():
    rng = np.random.default_rng(4)
    m = unit_slots(rng, 1, 2, 8)
    km = np.array([[True, True, False, False]])
    _, rec = memory_write(MemoryState(Tensor(m)), rng.normal(size=(1, 4, 8)), writer(), 0.25, km)
    assert np.all(rec.token_mass[..., 2:] == 0.0)


def test_lower_tau_sharpens_write():
    rng = np.random.default_rng(5)
    m = unit_slots(rng, 2, 3, 8)
    enc = 3 * rng.normal(size=(2, 6, 8))
    w = writer()

    def entropy(tau):
        raw, rec = memory_write(MemoryState(Tensor(m)), enc, w, tau)
        p = np.concatenate([rec.self_mass[..., None], rec.token_mass], -1)
        return -(p * np.log(np.clip(p, 1e-300, 1))).sum(-1)

    # head-averaged masses are a mixture, so compare per configuration on average
    assert entropy(0.25).mean() <= entropy(1.0).mean()


def test_bmn_examples():
    zero = bias_of(np.zeros((1, 2)))
    u = np.array([[[0.6, 0.8]]])
    assert np.allclose(bmn(Tensor(u), zero).slots.data, u)
    out = bmn(Tensor(np.array([[[0.0, 1.0]]])), bias_of([[1.0, 0.0]]), step=4)
    assert np.allclose(out.slots.data, [[[0.7071, 0.7071]]], atol=1e-4)
    assert out.step == 5
    v = np.array([[2.0, -1.0]])
    fixed = v / np.linalg.norm(v)
    assert np.allclose(bmn(Tensor(fixed[None]), bias_of(v)).slots.data[0], fixed)


def test_bmn_without_forgetting_keeps_normalisation():
    raw = Tensor(np.array([[[0.0, 3.0]]]))
    out = bmn(raw, bias_of([[5.0, 0.0]]), forget=False)
    assert np.allclose(out.slots.data, [[[0.0, 1.0]]])


def test_bmn_unit_norm_float32():
    rng = np.random.default_rng(6)
    raw = Tensor(rng.normal(size=(4, 8, 16)).astype(np.float32))
    b = ForgetBias(T.parameter(rng.normal(size=(8, 16)).astype(np.float32)))
    n = np.linalg.norm(bmn(raw, b).slots.data, axis=-1)
    assert np.all(np.abs(n - 1) <= 1e-5)


def test_forgetting_converges_to_bias_direction():
    rng = np.random.default_rng(7)
    for _ in range(100):
        D = int(rng.integers(2, 9))
        v = rng.normal(size=D)
        v *= rng.uniform(0.5, 4.0) / np.linalg.norm(v)
        target = v / np.linalg.norm(v)
        m = rng.normal(size=D)
        m /= np.linalg.norm(m)
        if m @ target < -0.99:
            continue
        for _ in range(200):
            m = m + v
            m /= np.linalg.norm(m)
        assert np.abs(m - target).max() < 1e-6


def test_classify_slots():
    assert classify_slots(np.array([1.0, 0.0, 0.5])) == [SELF_FOCUSED, INPUT_FOCUSED, MIXED]
    assert classify_slots(np.array(0.8)) == SELF_FOCUSED
    with pytest.raises(ValueError):
        classify_slots(np.array([0.5]), 0.2, 0.8)


def test_slot_write_stats_rows():
    rec = SlotWriteRecord(self_mass=np.array([[0.9, 0.1]]),
                          token_mass=np.array([[[0.05, 0.05, 0.0], [0.1, 0.7, 0.1]]]))
    rows = slot_write_stats(rec, step=7)
    assert [r["category"] for r in rows] == [SELF_FOCUSED, INPUT_FOCUSED]
    assert rows[1]["top_token_positions"][0] == 1
    assert set(rows[0]) == {"step", "slot_index", "self_mass", "category", "top_token_positions"}
