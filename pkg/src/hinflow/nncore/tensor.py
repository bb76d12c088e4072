"""Dense float64 tensors with an op-level reverse-mode gradient tape.

Ops execute eagerly on numpy arrays. While a :class:`Tape` is active (as a
context manager), every op whose result depends on a tracked tensor appends
one record; since execution order is construction order, the record list is
already topologically sorted and the backward pass is a single reverse sweep
that touches each node exactly once.

The tape is thread-local: independent threads may each run their own tape,
but a single tape must only ever be used from one thread.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

from ..errors import DimensionError, HinflowError

_ids = itertools.count()
_tls = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A row-major float64 array plus a node id for the tape.

    Values are validated to be finite at construction; op outputs skip the
    re-check (finite inputs through the ops here stay finite at training
    magnitudes, and losses/gradients are re-validated by the optimizer).
    """

    __slots__ = ("data", "id", "requires_grad")

    def __init__(self, values, shape=None, requires_grad=False, _checked=False):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(shape)
            expect = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if arr.size != expect:
                raise DimensionError(
                    f"cannot shape {arr.size} values as {shape} ({expect} slots)"
                )
            arr = arr.reshape(shape)
        if not _checked and not np.all(np.isfinite(arr)):
            raise HinflowError("tensor values must be finite (got NaN or Inf)")
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Flat row-major view of the underlying data."""
        return self.data.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, _checked=True)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.id}, grad={self.requires_grad})"


class _Op:
    __slots__ = ("name", "out_id", "in_ids", "vjp")

    def __init__(self, name, out_id, in_ids, vjp):
        self.name = name
        self.out_id = out_id
        self.in_ids = in_ids
        self.vjp = vjp


class Tape:
    """Ordered record of ops for one forward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self._out_ids: set[int] = set()

    def __enter__(self):
        if getattr(_tls, "tape", None) is not None:
            raise HinflowError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def op_names(self):
        return [op.name for op in self.ops]

    def record(self, name, out, inputs, vjp):
        self.ops.append(_Op(name, out.id, tuple(t.id for t in inputs), vjp))
        self._out_ids.add(out.id)

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar loss; returns {node id: gradient array}.

        Every tensor that participated in the recorded graph and lies on a
        path to `loss` gets an entry. Tensors not reached keep no entry;
        use :meth:`gradients` to zero-fill parameters.
        """
        if loss.data.ndim != 0:
            raise DimensionError(f"loss must be a scalar, got shape {loss.data.shape}")
        if loss.id not in self._out_ids:
            raise HinflowError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
        for op in reversed(self.ops):
            g = grads.get(op.out_id)
            if g is None:
                continue
            for in_id, gi in zip(op.in_ids, op.vjp(g)):
                if gi is None:
                    continue
                acc = grads.get(in_id)
                if acc is None:
                    grads[in_id] = gi
                else:
                    grads[in_id] = acc + gi
        return grads

    def gradients(self, loss: Tensor, params: dict) -> dict:
        """Gradients for a {name: Tensor} parameter dict, zero-filled when unreached."""
        table = self.backward(loss)
        out = {}
        for name, p in params.items():
            g = table.get(p.id)
            out[name] = np.zeros_like(p.data) if g is None else np.asarray(g)
        return out


def _active() -> Tape | None:
    return getattr(_tls, "tape", None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, _checked=False)


def _result(name, data, inputs, make_vjp):
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, _checked=True)
    if rg:
        tape = _active()
        if tape is not None:
            tape.record(name, out, inputs, make_vjp())
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    na, nb, ash, bsh = a.requires_grad, b.requires_grad, a.shape, b.shape

    def mk():
        def vjp(g):
            return (
                _unbroadcast(g, ash) if na else None,
                _unbroadcast(g, bsh) if nb else None,
            )

        return vjp

    return _result("add", a.data + b.data, (a, b), mk)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    na, nb, ash, bsh = a.requires_grad, b.requires_grad, a.shape, b.shape

    def mk():
        def vjp(g):
            return (
                _unbroadcast(g, ash) if na else None,
                _unbroadcast(-g, bsh) if nb else None,
            )

        return vjp

    return _result("sub", a.data - b.data, (a, b), mk)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape

    def mk():
        def vjp(g):
            return (
                _unbroadcast(g * bd, ash) if na else None,
                _unbroadcast(g * ad, bsh) if nb else None,
            )

        return vjp

    return _result("mul", ad * bd, (a, b), mk)


def scale(a, s: float):
    a = _wrap(a)
    s = float(s)

    def mk():
        return lambda g: (g * s,)

    return _result("scale", a.data * s, (a,), mk)


def neg(a):
    return scale(a, -1.0)


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def mk():
        return lambda g: (g.reshape(old),)

    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _result("reshape", data, (a,), mk)


def transpose_last2(a):
    a = _wrap(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs ndim >= 2, got {a.shape}")

    def mk():
        return lambda g: (g.swapaxes(-1, -2),)

    return _result("transpose", a.data.swapaxes(-1, -2), (a,), mk)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    needs = [p.requires_grad for p in parts]
    sizes = [p.shape[axis] for p in parts]

    def mk():
        edges = np.cumsum(sizes)[:-1]

        def vjp(g):
            pieces = np.split(g, edges, axis=axis)
            return tuple(p if n else None for p, n in zip(pieces, needs))

        return vjp

    data = np.concatenate([p.data for p in parts], axis=axis)
    return _result("concat", data, tuple(parts), mk)


def narrow(a, axis, start, length):
    """Slice `length` entries starting at `start` along `axis`."""
    a = _wrap(a)
    axis = int(axis)
    idx = (slice(None),) * axis + (slice(start, start + length),)
    full = a.shape

    def mk():
        def vjp(g):
            out = np.zeros(full)
            out[idx] = g
            return (out,)

        return vjp

    return _result("narrow", a.data[idx], (a,), mk)


def cumsum(a, axis):
    a = _wrap(a)
    axis = int(axis)

    def mk():
        def vjp(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return vjp

    return _result("cumsum", np.cumsum(a.data, axis=axis), (a,), mk)


def take_rows(table, indices):
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    table = _wrap(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def mk():
        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return vjp

    return _result("take_rows", table.data[idx], (table,), mk)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def mk():
        t = out

        def vjp(g):
            return (g * (1.0 - t * t),)

        return vjp

    return _result("tanh", out, (a,), mk)


def gelu(a):
    """GELU via the tanh approximation."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    out = 0.5 * x * (1.0 + t)

    def mk():
        def vjp(g):
            d_inner = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            return (g * d,)

        return vjp

    return _result("gelu", out, (a,), mk)


def softmax(a):
    """Softmax over the last axis; rows sum to one."""
    a = _wrap(a)
    x = a.data
    if x.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def mk():
        s = out

        def vjp(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return vjp

    return _result("softmax", out, (a,), mk)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply per-feature gain and bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    x = a.data
    xc = x - x.mean(axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    na, ng, nb = a.requires_grad, gain.requires_grad, bias.requires_grad

    def mk():
        gd = gain.data
        lead = tuple(range(x.ndim - 1))

        def vjp(g):
            dgain = (g * xhat).sum(axis=lead) if ng else None
            dbias = g.sum(axis=lead) if nb else None
            dx = None
            if na:
                dx = g * gd
                m2 = (dx * xhat).mean(axis=-1, keepdims=True)
                dx -= dx.mean(axis=-1, keepdims=True)
                dx -= xhat * m2
                dx *= inv
            return (dx, dgain, dbias)

        return vjp

    return _result("layer_norm", out, (a, gain, bias), mk)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product; both 2-D, or both 3-D with equal batch dimension."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    else:
        raise DimensionError(f"matmul supports 2D x 2D or 3D x 3D, got {ad.shape} x {bd.shape}")
    na, nb = a.requires_grad, b.requires_grad

    def mk():
        def vjp(g):
            ga = np.matmul(g, bd.swapaxes(-1, -2)) if na else None
            gb = np.matmul(ad.swapaxes(-1, -2), g) if nb else None
            return (ga, gb)

        return vjp

    return _result("matmul", np.matmul(ad, bd), (a, b), mk)


def attention(q, k, v):
    """Single-head scaled dot-product self-attention.

    q, k, v: (n, d) or batched (B, n, d). Weights are softmax(q k^T / sqrt(d)).
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention needs equal shapes, got {q.shape}/{k.shape}/{v.shape}")
    n, d = q.shape[-2], q.shape[-1]
    if n == 0:
        raise DimensionError("attention over an empty sequence")
    if d <= 0:
        raise DimensionError("attention feature dimension must be positive")
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(d))
    return matmul(softmax(scores), v)


def attention_qkv(x, wqkv, batch, n):
    """Fused projection + self-attention for the transformer blocks.

    `x` is (batch*n, d) of normalized tokens, `wqkv` a (d, 3d) fused
    projection. Equivalent to slicing q, k, v out of x @ wqkv and applying
    :func:`attention` per batch element, but recorded as a single op with
    an analytic backward pass.
    """
    x, wqkv = _wrap(x), _wrap(wqkv)
    bn, d = x.shape
    if wqkv.shape != (d, 3 * d):
        raise DimensionError(f"fused qkv weight must be {(d, 3 * d)}, got {wqkv.shape}")
    if n == 0:
        raise DimensionError("attention over an empty sequence")
    sc = 1.0 / math.sqrt(d)
    qkv = x.data @ wqkv.data
    q = qkv[:, :d].reshape(batch, n, d)
    k = qkv[:, d:2 * d].reshape(batch, n, d)
    v = qkv[:, 2 * d:].reshape(batch, n, d)
    w = np.matmul(q, k.swapaxes(1, 2))
    w *= sc
    w -= w.max(axis=-1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, v)

    def mk():
        nx, nw = x.requires_grad, wqkv.requires_grad

        def vjp(g):
            dw = np.matmul(g, v.swapaxes(1, 2))
            dv = np.matmul(w.swapaxes(1, 2), g)
            ds = dw
            ds -= (dw * w).sum(axis=-1, keepdims=True)
            ds *= w
            ds *= sc
            dqkv = np.empty((bn, 3 * d))
            dqkv[:, :d] = np.matmul(ds, k).reshape(bn, d)
            dqkv[:, d:2 * d] = np.matmul(ds.swapaxes(1, 2), q).reshape(bn, d)
            dqkv[:, 2 * d:] = dv.reshape(bn, d)
            gx = dqkv @ wqkv.data.T if nx else None
            gw = x.data.T @ dqkv if nw else None
            return (gx, gw)

        return vjp

    return _result("attention_qkv", out, (x, wqkv), mk)


def attn_block_fused(x, gain, bias, wqkv, eps=1e-5):
    """One pre-norm attention block as a single op: x + attn(LN(x) Wqkv).

    x: (B, n, d) tokens. Mathematically identical to layer_norm followed by
    :func:`attention_qkv` and a residual add, with one tape record and an
    analytic backward pass.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    b, n, d = x.shape
    if n == 0:
        raise DimensionError("attention over an empty sequence")
    if wqkv is not None:
        wqkv = _wrap(wqkv)
        if wqkv.shape != (d, 3 * d):
            raise DimensionError(f"fused qkv weight must be {(d, 3 * d)}, got {wqkv.shape}")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    h = (xhat * gain.data + bias.data).reshape(b * n, d)
    sc = 1.0 / math.sqrt(d)
    qkv = h @ wqkv.data
    q = qkv[:, :d].reshape(b, n, d)
    k = qkv[:, d:2 * d].reshape(b, n, d)
    v = qkv[:, 2 * d:].reshape(b, n, d)
    w = np.matmul(q, k.swapaxes(1, 2))
    w *= sc
    w -= w.max(axis=-1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, v)
    out += xd

    def mk():
        nx, ng, nb, nw = (
            x.requires_grad, gain.requires_grad, bias.requires_grad, wqkv.requires_grad
        )
        gd = gain.data

        def vjp(g):
            # attention part
            dw = np.matmul(g, v.swapaxes(1, 2))
            dv = np.matmul(w.swapaxes(1, 2), g)
            ds = dw
            ds -= (dw * w).sum(axis=-1, keepdims=True)
            ds *= w
            ds *= sc
            dqkv = np.empty((b * n, 3 * d))
            dqkv[:, :d] = np.matmul(ds, k).reshape(b * n, d)
            dqkv[:, d:2 * d] = np.matmul(ds.swapaxes(1, 2), q).reshape(b * n, d)
            dqkv[:, 2 * d:] = dv.reshape(b * n, d)
            gw = h.T @ dqkv if nw else None
            dh = (dqkv @ wqkv.data.T).reshape(b, n, d)
            # layer-norm part
            dgain = (dh * xhat).sum(axis=(0, 1)) if ng else None
            dbias = dh.sum(axis=(0, 1)) if nb else None
            gx = None
            if nx:
                dxhat = dh
                dxhat *= gd
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                dxhat -= dxhat.mean(axis=-1, keepdims=True)
                dxhat -= xhat * m2
                dxhat *= inv
                gx = dxhat
                gx += g  # residual path
            return (gx, dgain, dbias, gw)

        return vjp

    return _result("attn_block", out, (x, gain, bias, wqkv), mk)


# ---------------------------------------------------------------------------
# losses / reductions


def mean_all(a):
    a = _wrap(a)
    n = a.size

    def mk():
        shape = a.shape

        def vjp(g):
            return (np.broadcast_to(g / n, shape).copy(),)

        return vjp

    return _result("mean", np.asarray(a.data.mean()), (a,), mk)


def sum_all(a):
    a = _wrap(a)

    def mk():
        shape = a.shape

        def vjp(g):
            return (np.broadcast_to(g, shape).copy(),)

        return vjp

    return _result("sum", np.asarray(a.data.sum()), (a,), mk)


def mse(pred, target):
    """Mean squared element difference; shapes must match exactly."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size if diff.size else 1
    np_, nt = pred.requires_grad, target.requires_grad

    def mk():
        def vjp(g):
            base = (2.0 / n) * diff * g
            return (base if np_ else None, -base if nt else None)

        return vjp

    return _result("mse", np.asarray(np.mean(diff * diff)), (pred, target), mk)
