"""Dense tensors with an explicitly controlled reverse-mode tape.

The tape is global to the process (one worker owns it at a time).  Ops append a
:class:`TapeNode` only while recording is on and at least one input carries a
node, so running under :func:`no_grad` costs nothing beyond numpy.

Every node declares exactly which arrays its backward rule keeps alive; the
sum of those is ``Tape.retained_bytes``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class ParameterError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# live tensor accounting (used by the constant-memory generation check)


class _LiveBytes:
    enabled = False
    current = 0
    peak = 0

    @classmethod
    def reset_peak(cls):
        cls.peak = cls.current


@contextlib.contextmanager
def track_live_bytes():
    """Count bytes held by live Tensor objects while the block runs."""
    _LiveBytes.enabled = True
    _LiveBytes.current = 0
    _LiveBytes.peak = 0
    try:
        yield _LiveBytes
    finally:
        _LiveBytes.enabled = False


# ---------------------------------------------------------------------------
# tape


class TapeNode:
    __slots__ = ("op", "parents", "saved", "vjp", "shape", "nbytes", "index",
                 "tape", "grad", "owner")

    def __init__(self, op, parents, saved, vjp, shape):
        self.op = op
        self.parents = parents
        self.saved = saved
        self.vjp = vjp
        self.shape = shape
        self.nbytes = sum(a.nbytes for a in saved if isinstance(a, np.ndarray))
        self.index = -1
        self.tape = None
        self.grad = None
        self.owner = None

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def __repr__(self):
        return f"TapeNode({self.op}, shape={self.shape}, index={self.index})"


class Tape:
    """Append-only node list plus the retained-bytes meter."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.recording = True
        self.retained_bytes = 0
        # bytes held outside the tape (replay buffers, checkpoints)
        self.held_bytes = 0
        self.peak_bytes = 0

    def append(self, node: TapeNode):
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)
        self.retained_bytes += node.nbytes
        total = self.retained_bytes + self.held_bytes
        if total > self.peak_bytes:
            self.peak_bytes = total

    def hold(self, nbytes: int):
        self.held_bytes += nbytes
        total = self.retained_bytes + self.held_bytes
        if total > self.peak_bytes:
            self.peak_bytes = total

    def release(self, nbytes: int):
        self.held_bytes -= nbytes

    def reset_peak(self):
        self.peak_bytes = self.retained_bytes + self.held_bytes

    def clear(self):
        for node in self.nodes:
            node.index = -1
            node.tape = None
            node.saved = ()
            node.parents = ()
        self.nodes = []
        self.retained_bytes = 0

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def fresh_tape():
    """Swap in an empty tape for the duration of the block."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.recording
    _TAPE.recording = False
    try:
        yield
    finally:
        _TAPE.recording = prev


@contextlib.contextmanager
def recording():
    prev = _TAPE.recording
    _TAPE.recording = True
    try:
        yield
    finally:
        _TAPE.recording = prev


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "node", "name", "_counted", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, node=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.name = name
        if requires_grad:
            if arr.dtype.kind != "f":
                raise TypeError("only floating tensors can require grad")
            node = TapeNode("leaf", (), (), None, arr.shape)
            node.owner = self
        self.node = node
        if _LiveBytes.enabled:
            self._counted = arr.nbytes
            _LiveBytes.current += arr.nbytes
            if _LiveBytes.current > _LiveBytes.peak:
                _LiveBytes.peak = _LiveBytes.current
        else:
            self._counted = 0

    def __del__(self):
        if self._counted:
            _LiveBytes.current -= self._counted

    # -- basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def requires_grad(self):
        return self.node is not None

    @property
    def grad(self):
        if self.node is None or not self.node.is_leaf:
            return None
        return self.node.grad

    def zero_grad(self):
        if self.node is not None and self.node.is_leaf:
            self.node.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = "" if self.node is None else f", op={self.node.op}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], saved: tuple,
            vjp: Callable) -> Tensor:
    """Wrap ``out``; append a node when recording and any input is tracked."""
    tape = _TAPE
    if tape.recording:
        for t in inputs:
            if t.node is not None:
                break
        else:
            return Tensor(out)
        node = TapeNode(op, tuple(t.node for t in inputs), saved, vjp, out.shape)
        tape.append(node)
        return Tensor(out, node=node)
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def vjp(g, saved):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), (), vjp)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "subtract")
    sa, sb = a.shape, b.shape

    def vjp(g, saved):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record("subtract", a.data - b.data, (a, b), (), vjp)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "multiply")

    def vjp(g, saved):
        x, y = saved
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _record("multiply", a.data * b.data, (a, b), (a.data, b.data), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def vjp(g, saved):
        return (g * c,)

    return _record("scale", a.data * c, (a,), (), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g, saved):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), (), vjp)


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size

    def vjp(g, saved):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return _record("mean", np.asarray(a.data.mean()), (a,), (), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g, saved):
        x, t = saved
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (a,), (x, t), vjp)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g, saved):
        x, y = saved
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), (a.data, b.data), vjp)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` as one node; w is [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xshape = x.shape
    x2 = x.data.reshape(-1, xshape[-1])
    out = x2 @ w.data
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        inputs = (x, w, b)
    out = out.reshape(xshape[:-1] + (w.shape[1],))

    def vjp(g, saved):
        xd, wd = saved
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xshape)
        gw = xd.T @ g2
        if len(inputs) == 3:
            return gx, gw, g2.sum(0)
        return gx, gw

    return _record("linear", out, inputs, (x2, w.data), vjp)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g, saved):
        return (np.transpose(g, inv),)

    return _record("transpose", np.transpose(a.data, axes), (a,), (), vjp)


def swapaxes(a, i, j) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {shape}") from None

    def vjp(g, saved):
        return (g.reshape(src),)

    return _record("reshape", out, (a,), (), vjp)


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, saved):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _record("concat", out, ts, (), vjp)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {shape}") from None

    def vjp(g, saved):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("slice", np.array(out), (a,), (), vjp)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    tshape = table.shape

    def vjp(g, saved):
        (idx,) = saved
        full = np.zeros(tshape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, tshape[-1]))
        return (full,)

    return _record("embedding", table.data[ids], (table,), (ids,), vjp)


# ---------------------------------------------------------------------------
# normalisation / probability


def softmax_t(logits, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``logits / tau`` along ``axis``, max-subtracted."""
    logits = as_tensor(logits)
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    x = logits.data
    if np.isnan(x).any():
        raise NumericError("softmax_t: NaN in logits")
    z = x / tau if tau != 1.0 else x
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, saved):
        (y,) = saved
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return (gx / tau if tau != 1.0 else gx,)

    return _record("softmax", y, (logits,), (y,), vjp)


class _Diagnostics:
    l2_fallbacks = 0


diagnostics = _Diagnostics()


def l2_normalize(v, eps: float = 1e-8) -> Tensor:
    """Unit-normalise along the last axis.

    Vectors with norm below ``eps`` become the first standard basis vector and
    pass no gradient; each such event bumps ``diagnostics.l2_fallbacks``.
    """
    v = as_tensor(v)
    x = v.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    bad = n < eps
    if bad.any():
        diagnostics.l2_fallbacks += int(bad.sum())
        n_safe = np.where(bad, 1.0, n)
        y = x / n_safe
        fallback = np.zeros(x.shape[-1], dtype=x.dtype)
        fallback[0] = 1.0
        y = np.where(bad, fallback, y)
    else:
        n_safe = n
        y = x / n

    def vjp(g, saved):
        y, n_safe, bad = saved
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / n_safe
        if bad is not None:
            gx = np.where(bad, 0.0, gx)
        return (gx,)

    return _record("l2_normalize", y, (v,), (y, n_safe, bad if bad.any() else None), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g, saved):
        xhat, rstd, gam = saved
        gxhat = g * gam
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(0), flat.sum(0)

    return _record("layer_norm", out, (x, gamma, beta), (xhat, rstd, gamma.data), vjp)


class CounterRNG:
    """Counter-based mask source: the mask depends only on (key, call index).

    ``fork(*key)`` starts a fresh call counter under a new key, so replaying a
    forward step with the same key reproduces every dropout mask bit for bit.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.calls = 0

    def fork(self, *key) -> "CounterRNG":
        return CounterRNG(self.seed, self.key + tuple(key))

    def uniform(self, shape) -> np.ndarray:
        gen = np.random.default_rng(np.random.SeedSequence([self.seed, *self.key, self.calls]))
        self.calls += 1
        return gen.random(shape)


def dropout(x, rate: float, rng: CounterRNG | None, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or rate <= 0.0 or rng is None:
        return x
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def vjp(g, saved):
        return (g * saved[0],)

    return _record("dropout", x.data * keep, (x,), (keep,), vjp)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean token cross-entropy; ``mask`` (bool, same shape as targets) selects tokens."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"cross_entropy: target outside vocabulary of size {V}")
    x = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype).reshape(-1)
    count = max(w.sum(), 1.0)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(t)), t]
    loss = np.asarray((nll * w).sum() / count, dtype=x.dtype)
    shape = logits.shape

    def vjp(g, saved):
        z, lse, t, w = saved
        p = np.exp(z - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w * (g / count))[:, None]
        return (p.reshape(shape),)

    return _record("cross_entropy", loss, (logits,), (z, lse, t, w), vjp)


def add_mask(scores, additive: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array, e.g. a -1e30 attention mask."""
    scores = as_tensor(scores)

    def vjp(g, saved):
        return (g,)

    return _record("add_mask", scores.data + additive, (scores,), (), vjp)


# ---------------------------------------------------------------------------
# backward


class GradStore(dict):
    """Maps parameter Tensors (by identity) to their accumulated gradient arrays."""

    def global_norm(self) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in self.values()))


def backward(root: Tensor, seed=None) -> GradStore:
    """Propagate ``seed`` from ``root`` to every reachable leaf.

    Leaf gradients accumulate across calls until the leaves are zeroed, so
    two calls over one recorded graph sum their contributions.
    """
    node = root.node
    tape = _TAPE
    if node is None or node.is_leaf or node.tape is not tape or node.index < 0:
        raise TapeStateError("backward: root is not on the recording tape")
    if seed is None:
        if root.size != 1:
            raise DimensionError(f"backward: non-scalar root {root.shape} needs a seed")
        seed_arr = np.ones(root.shape, dtype=root.dtype)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=root.dtype)
        if seed_arr.shape != root.shape:
            raise DimensionError(f"backward: seed shape {seed_arr.shape} != root shape {root.shape}")

    store = GradStore()
    grads = {node: seed_arr}
    nodes = tape.nodes
    for i in range(node.index, -1, -1):
        n = nodes[i]
        g = grads.pop(n, None)
        if g is None:
            continue
        pgrads = n.vjp(g, n.saved)
        for p, pg in zip(n.parents, pgrads):
            if p is None or pg is None:
                continue
            if p.is_leaf:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.owner.dtype, copy=True)
                else:
                    p.grad += pg
                store[p.owner] = p.grad
            elif p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return store


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6,
                      coords=None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The error is ``max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf)``;
    when that scale falls below 1e-8 the absolute difference is reported instead.
    ``coords`` optionally restricts the comparison to a subset of flat indices.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with fresh_tape(), recording():
        x = Tensor(x0.copy(), requires_grad=True)
        y = f(x)
        if not isinstance(y, Tensor) or y.size != 1:
            raise TypeError("finite_diff_check: f must return a scalar Tensor")
        if y.node is None:
            analytic = np.zeros_like(x0)
        else:
            backward(y)
            analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    a_vals, n_vals = [], []
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x0)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x0)).data)
            flat[i] = orig
            n_vals.append((fp - fm) / (2 * eps))
            a_vals.append(analytic.reshape(-1)[i])
    a_vals, n_vals = np.array(a_vals), np.array(n_vals)
    diff = np.abs(a_vals - n_vals).max() if len(a_vals) else 0.0
    scale_ = max(np.abs(a_vals).max(initial=0.0), np.abs(n_vals).max(initial=0.0))
    return float(diff / scale_) if scale_ >= 1e-8 else float(diff)
