"""Differentiable operators.

Every public op takes and returns :class:`Tensor` objects and registers a
backward rule on the active :class:`Graph`. Arguments that are plain numpy
arrays are treated as constants. Ops preserve the floating dtype of their
first tensor input, so the same code runs in float32 for training and in
float64 for the finite-difference oracle.
"""

from __future__ import annotations

import math

import numpy as np

from .. import kernels
from .tensor import Tensor, record

OPS: dict[str, object] = {}

MASK_NEG = -1e9


def register(fn):
    OPS[fn.__name__] = fn
    return fn


def _shape_error(op, *shapes):
    return ValueError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.float32


def _new(arr, dtype) -> Tensor:
    return Tensor(arr, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise and structural ------------------------------------------------

@register
def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        out = _new(av + bv, _dtype_of(a, b))
    except ValueError:
        raise _shape_error("add", av.shape, bv.shape) from None

    def back(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return record("add", (a, b), out, back)


@register
def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        out = _new(av - bv, _dtype_of(a, b))
    except ValueError:
        raise _shape_error("sub", av.shape, bv.shape) from None

    def back(g):
        return _unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)

    return record("sub", (a, b), out, back)


@register
def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        out = _new(av * bv, _dtype_of(a, b))
    except ValueError:
        raise _shape_error("mul", av.shape, bv.shape) from None

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return record("mul", (a, b), out, back)


@register
def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise _shape_error("matmul", av.shape, bv.shape)
    out = _new(av @ bv, _dtype_of(a, b))

    def back(g):
        if bv.ndim == 2 and av.ndim > 2:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return record("matmul", (a, b), out, back)


@register
def reshape(x: Tensor, shape) -> Tensor:
    xv = _val(x)
    try:
        out = _new(xv.reshape(shape), x.dtype)
    except ValueError:
        raise _shape_error("reshape", xv.shape, tuple(shape)) from None

    def back(g):
        return (g.reshape(xv.shape),)

    return record("reshape", (x,), out, back)


@register
def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _new(np.transpose(x.data, axes), x.dtype)

    def back(g):
        return (np.transpose(g, inv),)

    return record("transpose", (x,), out, back)


@register
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xv = x.data
    out = _new(xv.sum(axis=axis, keepdims=keepdims), x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return record("sum", (x,), out, back)


@register
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.data
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    out = _new(xv.mean(axis=axis, keepdims=keepdims), x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xv.shape).astype(xv.dtype),)

    return record("mean", (x,), out, back)


@register
def concat(tensors, axis: int = -1) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = _new(np.concatenate(vals, axis=axis), _dtype_of(*tensors))
    except ValueError:
        raise _shape_error("concat", *[v.shape for v in vals]) from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, back)


@register
def stack(tensors, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = _new(np.stack(vals, axis=axis), _dtype_of(*tensors))
    except ValueError:
        raise _shape_error("stack", *[v.shape for v in vals]) from None

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record("stack", tuple(tensors), out, back)


@register
def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    xv = x.data
    idx = [slice(None)] * xv.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _new(xv[idx], x.dtype)

    def back(g):
        gx = np.zeros_like(xv)
        gx[idx] = g
        return (gx,)

    return record("slice_axis", (x,), out, back)


@register
def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    xv = x.data
    out = _new(np.take(xv, index, axis=axis), x.dtype)

    def back(g):
        gx = np.zeros_like(xv)
        idx = [slice(None)] * xv.ndim
        idx[axis] = index
        gx[tuple(idx)] = g
        return (gx,)

    return record("select", (x,), out, back)


# -- activations -----------------------------------------------------------------

@register
def identity(x: Tensor) -> Tensor:
    return x


@register
def relu(x: Tensor) -> Tensor:
    xv = x.data
    pos = xv > 0
    out = _new(np.where(pos, xv, 0), x.dtype)

    def back(g):
        return (g * pos,)

    return record("relu", (x,), out, back)


def _sigmoid(z):
    # tanh form never overflows and avoids masked indexing
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@register
def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _new(s, x.dtype)

    def back(g):
        return (g * s * (1 - s),)

    return record("sigmoid", (x,), out, back)


@register
def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _new(t, x.dtype)

    def back(g):
        return (g * (1 - t * t),)

    return record("tanh", (x,), out, back)


def _softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@register
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(x.data, axis)
    out = _new(s, x.dtype)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, back)


ACTIVATIONS = {
    "identity": identity,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
}


# -- layers ----------------------------------------------------------------------

@register
def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    xv, Wv = _val(x), _val(W)
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[0]:
        raise _shape_error("dense", xv.shape, Wv.shape)
    y = xv @ Wv
    if b is not None:
        y = y + _val(b)
    out = _new(y, _dtype_of(x, W))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wv.T
        gW = xv.reshape(-1, xv.shape[-1]).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return record("affine", inputs, out, back)


def dense(x: Tensor, W: Tensor, b: Tensor | None = None,
          activation: str = "identity") -> Tensor:
    """Affine map followed by one of ``ACTIVATIONS``."""
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"dense: unknown activation {activation!r}") from None
    return act(affine(x, W, b))


OPS["dense"] = dense


@register
def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None,
            training: bool = False) -> Tensor:
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = _new(x.data * keep, x.dtype)

    def back(g):
        return (g * keep,)

    return record("dropout", (x,), out, back)


@register
def embedding_lookup(table: Tensor, ids, padding_idx: int | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    V, D = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"embedding_lookup: id out of range [0, {V}) "
                         f"(got min {ids.min()}, max {ids.max()})")
    out = _new(table.data[ids], table.dtype)

    def back(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(gt, np.ascontiguousarray(ids.ravel()),
                                 np.ascontiguousarray(g.reshape(-1, D)))
        if padding_idx is not None:
            gt[padding_idx] = 0
        return (gt,)

    return record("embedding_lookup", (table,), out, back)


def _masked_mean(op_name, x, mask):
    xv = x.data
    m = np.asarray(mask, dtype=xv.dtype)
    if m.shape != xv.shape[:-1]:
        raise _shape_error(op_name, xv.shape, m.shape)
    cnt = np.maximum(m.sum(axis=-1, keepdims=True), 1)
    w = m / cnt
    out = _new(np.einsum("...sd,...s->...d", xv, w), x.dtype)

    def back(g):
        return (g[..., None, :] * w[..., None],)

    return record(op_name, (x,), out, back)


@register
def mean_over_set(x: Tensor, mask) -> Tensor:
    """Mean over the set axis (-2) of the entries whose mask is 1."""
    return _masked_mean("mean_over_set", x, mask)


@register
def global_average_pool(x: Tensor, mask=None) -> Tensor:
    """Mean over the time axis of (B, L, C), restricted to mask==1 if given."""
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=x.dtype)
    return _masked_mean("global_average_pool", x, mask)


@register
def conv1d(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid, stride-1 convolution: x (B, L, C), W (k, C, F) -> (B, L-k+1, F)."""
    xv, Wv = x.data, W.data
    if xv.ndim != 3 or Wv.ndim != 3 or xv.shape[2] != Wv.shape[1] or xv.shape[1] < Wv.shape[0]:
        raise _shape_error("conv1d", xv.shape, Wv.shape)
    B, L, C = xv.shape
    k, _, F = Wv.shape
    Lout = L - k + 1
    cols = np.lib.stride_tricks.sliding_window_view(xv, k, axis=1)  # B, Lout, C, k
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(B * Lout, k * C)
    Wr = Wv.reshape(k * C, F)
    y = cols @ Wr
    if b is not None:
        y = y + b.data
    out = _new(y.reshape(B, Lout, F), x.dtype)

    def back(g):
        g2 = g.reshape(B * Lout, F)
        gW = (cols.T @ g2).reshape(k, C, F)
        gcols = (g2 @ Wr.T).reshape(B, Lout, k, C)
        gx = np.zeros_like(xv)
        for i in range(k):
            gx[:, i:i + Lout, :] += gcols[:, :, i, :]
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return record("conv1d", inputs, out, back)


@register
def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the time axis.

    Pools are aligned to the last step, so a ragged remainder is dropped from
    the start of the sequence; the most recent steps are never discarded.
    """
    xv = x.data
    B, L, C = xv.shape
    Lout = L // size
    if Lout < 1:
        raise _shape_error("maxpool1d", xv.shape, (size,))
    off = L - Lout * size
    xr = xv[:, off:].reshape(B, Lout, size, C)
    arg = xr.argmax(axis=2)
    out = _new(np.take_along_axis(xr, arg[:, :, None, :], axis=2)[:, :, 0, :], x.dtype)

    def back(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, arg[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(xv)
        gx[:, off:] = gr.reshape(B, Lout * size, C)
        return (gx,)

    return record("maxpool1d", (x,), out, back)


@register
def lstm_cell(x: Tensor, h, c, W: Tensor, b: Tensor, step_mask=None) -> Tensor:
    """One LSTM step; returns [h', c'] concatenated on the last axis.

    Gates are ordered input, forget, candidate, output. Rows whose
    ``step_mask`` is 0 carry ``h`` and ``c`` through unchanged.
    """
    xv, hv, cv, Wv, bv = _val(x), _val(h), _val(c), W.data, b.data
    H = hv.shape[-1]
    if Wv.shape != (xv.shape[-1] + H, 4 * H) or bv.shape != (4 * H,):
        raise _shape_error("lstm_cell", xv.shape, hv.shape, Wv.shape, bv.shape)
    xh = np.concatenate([xv, hv], axis=-1)
    z = xh @ Wv + bv
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    gg = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * cv + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if step_mask is not None:
        m = np.asarray(step_mask, dtype=xv.dtype).reshape(-1, 1)
        h_out = m * h_new + (1 - m) * hv
        c_out = m * c_new + (1 - m) * cv
    else:
        m = None
        h_out, c_out = h_new, c_new
    out = _new(np.concatenate([h_out, c_out], axis=-1), _dtype_of(x, W))

    def back(g):
        gh, gc = g[:, :H], g[:, H:]
        if m is not None:
            gh_prev_pass, gc_prev_pass = gh * (1 - m), gc * (1 - m)
            gh, gc = gh * m, gc * m
        go = gh * tc
        gct = gc + gh * o * (1 - tc * tc)
        gf = gct * cv
        gi = gct * gg
        ggg = gct * i
        gc_prev = gct * f
        dz = np.concatenate([gi * i * (1 - i), gf * f * (1 - f),
                             ggg * (1 - gg * gg), go * o * (1 - o)], axis=-1)
        gW = xh.T @ dz
        gb = dz.sum(axis=0)
        gxh = dz @ Wv.T
        gx = gxh[:, :xv.shape[-1]]
        gh_prev = gxh[:, xv.shape[-1]:]
        if m is not None:
            gh_prev = gh_prev + gh_prev_pass
            gc_prev = gc_prev + gc_prev_pass
        return gx, gh_prev, gc_prev, gW, gb

    return record("lstm_cell", (x, h, c, W, b), out, back)


@register
def lstm_sequence(x: Tensor, mask, W: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM over (B, L, D) and return the hidden state after every step.

    Same gates and masking as ``lstm_cell``; ``reverse`` walks the steps from
    last to first. Backpropagation through time is done in one fused pass.
    """
    xv, Wv, bv = x.data, W.data, b.data
    B, L, D = xv.shape
    H = bv.shape[0] // 4
    if Wv.shape != (D + H, 4 * H) or bv.shape != (4 * H,):
        raise _shape_error("lstm_sequence", xv.shape, Wv.shape, bv.shape)
    dt = _dtype_of(x, W)
    m = np.ones((B, L), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    if m.shape != (B, L):
        raise _shape_error("lstm_sequence", xv.shape, m.shape)
    Wx, Wh = Wv[:D], Wv[D:]
    zx = xv @ Wx + bv
    order = range(L - 1, -1, -1) if reverse else range(L)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    hs = np.zeros((B, L, H), dtype=dt)
    cache = {}
    for t in order:
        z = zx[:, t] + h @ Wh
        sz = _sigmoid(z)
        i, f, o = sz[:, :H], sz[:, H:2 * H], sz[:, 3 * H:]
        gg = np.tanh(z[:, 2 * H:3 * H])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        mt = m[:, t:t + 1]
        cache[t] = (h, c, i, f, gg, o, tc, mt)
        h = mt * (o * tc) + (1 - mt) * h
        c = mt * c_new + (1 - mt) * c
        hs[:, t] = h
    out = _new(hs, dt)

    def back(g):
        dz_all = np.zeros((B, L, 4 * H), dtype=dt)
        gWh = np.zeros_like(Wh)
        dh = np.zeros((B, H), dtype=dt)
        dc = np.zeros((B, H), dtype=dt)
        for t in reversed(order):
            h_prev, c_prev, i, f, gg, o, tc, mt = cache[t]
            gh = g[:, t] + dh
            gh_pass, gc_pass = gh * (1 - mt), dc * (1 - mt)
            gh, gc = gh * mt, dc * mt
            go = gh * tc
            gct = gc + gh * o * (1 - tc * tc)
            dz = np.concatenate([gct * gg * i * (1 - i), gct * c_prev * f * (1 - f),
                                 gct * i * (1 - gg * gg), go * o * (1 - o)], axis=-1)
            dz_all[:, t] = dz
            gWh += h_prev.T @ dz
            dh = dz @ Wh.T + gh_pass
            dc = gct * f + gc_pass
        gx = dz_all @ Wx.T
        gWx = np.einsum("bld,blk->dk", xv, dz_all)
        return gx, np.concatenate([gWx, gWh], axis=0), dz_all.sum(axis=(0, 1))

    return record("lstm_sequence", (x, W, b), out, back)


@register
def bidirectional_lstm_layer(x: Tensor, mask, Wf: Tensor, bf: Tensor,
                             Wb: Tensor, bb: Tensor):
    """Run an LSTM forwards and backwards over (B, L, D).

    Returns ``(sequence, final)``: the (B, L, 2H) per-step outputs and the
    (B, 2H) concatenation of the forward state after the last step with the
    backward state after the first step. Masked steps leave the state alone,
    so left padding does not disturb either direction.
    """
    L = x.shape[1]
    fw = lstm_sequence(x, mask, Wf, bf)
    bw = lstm_sequence(x, mask, Wb, bb, reverse=True)
    seq = concat([fw, bw], axis=-1)
    final = concat([select(fw, L - 1, axis=1), select(bw, 0, axis=1)], axis=-1)
    return seq, final


def _split_heads(a, B, L, heads, dk):
    return a.reshape(B, L, heads, dk).transpose(0, 2, 1, 3)


def _merge_heads(a, B, L, d):
    return a.transpose(0, 2, 1, 3).reshape(B, L, d)


@register
def multi_head_attention(x: Tensor, Wq: Tensor, bq: Tensor, Wk: Tensor, bk: Tensor,
                         Wv: Tensor, bv: Tensor, Wo: Tensor, bo: Tensor,
                         heads: int, key_mask=None, return_weights: bool = False):
    """Scaled dot-product self-attention over (B, L, d) with ``heads`` heads.

    ``key_mask`` (B, L) marks keys that may be attended to; masked keys get
    exactly zero weight.
    """
    xv = x.data
    B, L, d = xv.shape
    if d % heads:
        raise ValueError(f"multi_head_attention: model dim {d} not divisible by {heads} heads")
    for W in (Wq, Wk, Wv, Wo):
        if W.shape != (d, d):
            raise _shape_error("multi_head_attention", xv.shape, W.shape)
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)
    x2 = xv.reshape(B * L, d)
    Q = _split_heads(x2 @ Wq.data + bq.data, B, L, heads, dk)
    K = _split_heads(x2 @ Wk.data + bk.data, B, L, heads, dk)
    V = _split_heads(x2 @ Wv.data + bv.data, B, L, heads, dk)
    S = (Q @ K.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=xv.dtype)
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        S = np.where(km[:, None, None, :], S, np.asarray(MASK_NEG, dtype=xv.dtype))
    A = _softmax(S)
    O = _merge_heads(A @ V, B, L, d)
    O2 = O.reshape(B * L, d)
    y = (O2 @ Wo.data + bo.data).reshape(B, L, d)
    out = _new(y, x.dtype)

    def back(g):
        g2 = g.reshape(B * L, d)
        gWo = O2.T @ g2
        gbo = g2.sum(axis=0)
        gO = _split_heads(g2 @ Wo.data.T, B, L, heads, dk)
        gA = gO @ V.transpose(0, 1, 3, 2)
        gV = A.transpose(0, 1, 3, 2) @ gO
        gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True)) * scale
        gQ = gS @ K
        gK = gS.transpose(0, 1, 3, 2) @ Q
        gQ2 = _merge_heads(gQ, B, L, d).reshape(B * L, d)
        gK2 = _merge_heads(gK, B, L, d).reshape(B * L, d)
        gV2 = _merge_heads(gV, B, L, d).reshape(B * L, d)
        gx = gQ2 @ Wq.data.T + gK2 @ Wk.data.T + gV2 @ Wv.data.T
        return (gx.reshape(B, L, d),
                x2.T @ gQ2, gQ2.sum(axis=0),
                # a key bias shifts every score in a row equally; softmax ignores it
                x2.T @ gK2, np.zeros_like(bk.data),
                x2.T @ gV2, gV2.sum(axis=0),
                gWo, gbo)

    out = record("multi_head_attention", (x, Wq, bq, Wk, bk, Wv, bv, Wo, bo), out, back)
    if return_weights:
        return out, A
    return out


@register
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xv = x.data
    if gamma.shape != (xv.shape[-1],) or beta.shape != (xv.shape[-1],):
        raise _shape_error("layer_norm", xv.shape, gamma.shape, beta.shape)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.dtype))
    xhat = xc * inv
    out = _new(xhat * gamma.data + beta.data, x.dtype)
    n = xv.shape[-1]

    def back(g):
        dxhat = g * gamma.data
        gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        red = tuple(range(xv.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", (x, gamma, beta), out, back)


def positional_encoding(positions, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal encodings for integer ``positions``; shape (len, d)."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


@register
def positional_encoding_add(x: Tensor, positions) -> Tensor:
    """Add sinusoidal encodings for ``positions`` along the time axis of (B, L, d)."""
    xv = x.data
    positions = np.asarray(positions)
    if positions.shape != (xv.shape[1],):
        raise _shape_error("positional_encoding_add", xv.shape, positions.shape)
    pe = positional_encoding(positions, xv.shape[-1], xv.dtype)
    out = _new(xv + pe[None], x.dtype)

    def back(g):
        return (g,)

    return record("positional_encoding_add", (x,), out, back)


# -- losses ----------------------------------------------------------------------

@register
def categorical_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross entropy of (B, K) logits against integer targets."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.intp)
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise _shape_error("categorical_cross_entropy", z.shape, targets.shape)
    z64 = z.astype(np.float64)
    zs = z64 - z64.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    B = z.shape[0]
    loss = float((logsum - zs[np.arange(B), targets]).mean())
    out = _new(loss, logits.dtype)

    def back(g):
        p = _softmax(z64)
        p[np.arange(B), targets] -= 1.0
        return ((p * (float(np.asarray(g).reshape(-1)[0]) / B)).astype(z.dtype),)

    return record("categorical_cross_entropy", (logits,), out, back)


@register
def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross entropy over every label and batch row."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise _shape_error("binary_cross_entropy", z.shape, y.shape)
    z64 = z.astype(np.float64)
    loss = float((np.maximum(z64, 0) - z64 * y + np.log1p(np.exp(-np.abs(z64)))).mean())
    out = _new(loss, logits.dtype)
    n = z.size

    def back(g):
        return (((_sigmoid(z64) - y) * (float(np.asarray(g).reshape(-1)[0]) / n)).astype(z.dtype),)

    return record("binary_cross_entropy", (logits,), out, back)
