"""Differentiable operations on :class:`Tensor`.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or one of them is a single-element scalar, or one shape is a trailing
suffix of the other (the bias-vector case). Anything else is a
:class:`DimensionError`.
"""

import builtins

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Partial, Tensor, as_tensor, record

# -- helpers -----------------------------------------------------------------


def _pair_shape(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if b.size == 1 and b.ndim <= 1:
        return sa
    if a.size == 1 and a.ndim <= 1:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(
        f"{op}: shapes {sa} and {sb} differ on trailing axes; only equal shapes, "
        "scalars and trailing-suffix bias shapes are supported"
    )


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.full(shape, g.sum())
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _pair_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _pair_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _pair_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _pair_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _reduce_to(g / bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), backward)


# -- nonlinearities ----------------------------------------------------------


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return record("relu", x.data * mask, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", y, (x,), backward)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return record("tanh", y, (x,), backward)


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ContractError("log: input must be strictly positive")
    xd = x.data

    def backward(g):
        return (g / xd,)

    return record("log", np.log(xd), (x,), backward)


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), backward)


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return record("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, shape),)

    return record("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    original = x.shape

    def backward(g):
        return (np.reshape(g, original),)

    return record("reshape", out, (x,), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of the {x.ndim} axes of {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return record("transpose", x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat: shape {t.shape} does not match {ref} off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for k in range(len(tensors)):
            index = [builtins.slice(None)] * ndim
            index[axis] = builtins.slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(index)])
        return out

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice(x, index):  # noqa: A001 - op id from the operation table
    """Basic indexing (ints, slices, Ellipsis, None); gradients scatter back sparsely."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (item is None or item is Ellipsis or isinstance(item, (int, np.integer, builtins.slice))):
            raise ContractError(f"slice: only basic indexing is supported, got {type(item).__name__}")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: index {index} is out of range for shape {x.shape}") from exc
    has_none = any(item is None for item in index)
    target = tuple(item for item in index if item is not None)

    def backward(g):
        if has_none:
            g = np.reshape(g, x.data[target].shape)
        return (Partial(target, g),)

    return record("slice", out, (x,), backward)


def expand(x, shape):
    """Repeat size-1 axes of ``x`` to reach ``shape`` (same rank)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if len(shape) != x.ndim or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}; only size-1 axes may grow")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    original = x.shape

    def backward(g):
        return (g.sum(axis=axes, keepdims=True).reshape(original),)

    return record("expand", np.broadcast_to(x.data, shape), (x,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes.

    Supported layouts: ``(..., m, k) @ (k, n)``, ``(m, k) @ (..., k, n)`` and
    ``(..., m, k) @ (..., k, n)`` with identical leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: both operands need at least 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: contraction axis mismatch, a axis -1 has {a.shape[-1]} but b axis -2 has {b.shape[-2]}"
        )
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes {a.shape[:-2]} and {b.shape[:-2]} differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and bd.ndim > 2:
                ga = (g @ np.swapaxes(bd, -1, -2)).reshape((-1,) + ad.shape).sum(axis=0)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


def conv2d(x, weight, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``x`` is ``(B, C, H, W)`` and ``weight`` is ``(O, C, kh, kw)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input channel axis 1 has {x.shape[1]} but kernel axis 1 has {weight.shape[1]}"
        )
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    if h + 2 * p < kh or w + 2 * p < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * p}x{w + 2 * p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    # column buffer laid out (kh, kw, c, n, ho, wo) so every shift is one contiguous block
    cols = np.empty((kh, kw, c, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(1, 0, 2, 3)
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gx = gw = None
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw

    return record("conv2d", np.ascontiguousarray(out), (x, weight), backward)


# -- normalisation and regularisation -----------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalisation over every axis except axis 1 (channels).

    ``running_var`` stores the normaliser variance (batch variance plus
    ``eps``), so inference divides by ``sqrt(running_var)`` directly and a
    stored variance of exactly 1 is an exact identity. ``running_mean`` and
    ``running_var`` are numpy arrays updated in place in training mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise DimensionError(f"batchnorm: input needs a channel axis, got {x.shape}")
    c = x.shape[1]
    for label, arr in (("gamma", gamma.shape), ("beta", beta.shape),
                       ("running_mean", np.shape(running_mean)), ("running_var", np.shape(running_var))):
        if arr != (c,):
            raise DimensionError(f"batchnorm: {label} has shape {arr}, expected ({c},) for channel axis 1")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centred = x.data - mu
        var = (centred * centred).mean(axis=axes, keepdims=True) + eps
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        mu = np.reshape(running_mean, bshape)
        centred = x.data - mu
        var = np.reshape(running_var, bshape)
    inv = 1.0 / np.sqrt(var)
    xhat = centred * inv
    out = xhat * gd + bd

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv
        return gx, ggamma, gbeta

    return record("batchnorm", out, (x, gamma, beta), backward)


def dropout(x, rate, training, rng=None):
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * mask,)

    return record("dropout", x.data * mask, (x,), backward)


# -- recurrent ---------------------------------------------------------------


def lstm(x, w_ih, w_hh, bias, reverse=False):
    """Single-direction LSTM over a ``(B, T, D)`` sequence with zero initial state.

    Gates are packed ``[input, forget, cell, output]`` along the last axis of
    ``w_ih`` ``(D, 4H)``, ``w_hh`` ``(H, 4H)`` and ``bias`` ``(4H,)``. Returns the
    hidden states ``(B, T, H)`` in the original time order.
    """
    x, w_ih, w_hh, bias = (as_tensor(v) for v in (x, w_ih, w_hh, bias))
    if x.ndim != 3:
        raise DimensionError(f"lstm: input must be (B, T, D), got {x.shape}")
    b_, t_, d_ = x.shape
    hidden = w_hh.shape[0]
    if w_ih.shape != (d_, 4 * hidden) or w_hh.shape != (hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise DimensionError(
            f"lstm: weights {w_ih.shape}, {w_hh.shape}, {bias.shape} do not match input width {d_} "
            f"and hidden size {hidden}"
        )
    H = hidden
    xp = x.data @ w_ih.data + bias.data
    whh = w_hh.data
    steps = range(t_ - 1, -1, -1) if reverse else range(t_)
    gates = np.empty((t_, b_, 4 * H))
    cells = np.empty((t_, b_, H))
    prev_h = np.empty((t_, b_, H))
    prev_c = np.empty((t_, b_, H))
    out = np.empty((b_, t_, H))
    h = np.zeros((b_, H))
    c = np.zeros((b_, H))
    for t in steps:
        z = xp[:, t] + h @ whh
        act = np.empty_like(z)
        act[:, :2 * H] = _sigmoid(z[:, :2 * H])
        act[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        act[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        prev_h[t], prev_c[t] = h, c
        c = act[:, H:2 * H] * c + act[:, :H] * act[:, 2 * H:3 * H]
        h = act[:, 3 * H:] * np.tanh(c)
        gates[t], cells[t] = act, c
        out[:, t] = h

    def backward(g):
        dxp = np.empty((b_, t_, 4 * H))
        dwhh = np.zeros_like(whh)
        dh_next = np.zeros((b_, H))
        dc_next = np.zeros((b_, H))
        for t in reversed(list(steps)):
            act = gates[t]
            i, f, gg, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
            tc = np.tanh(cells[t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.empty((b_, 4 * H))
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * prev_c[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dwhh += prev_h[t].T @ dz
            dh_next = dz @ whh.T
            dxp[:, t] = dz
        flat = dxp.reshape(-1, 4 * H)
        gx = (dxp @ w_ih.data.T) if x.requires_grad else None
        gwih = x.data.reshape(-1, d_).T @ flat if w_ih.requires_grad else None
        gb = flat.sum(axis=0) if bias.requires_grad else None
        return gx, gwih, dwhh, gb

    return record("lstm", out, (x, w_ih, w_hh, bias), backward)


OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "softmax-last-axis": softmax,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "mean": mean,
    "sum": sum,
    "batchnorm": batchnorm,
    "dropout": dropout,
    "slice": slice,
    "expand": expand,
    "lstm": lstm,
}


def forward_op(name, inputs, **attrs):
    """Dispatch by operation id, e.g. ``forward_op("conv2d", [x, w], stride=2, padding=1)``."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ContractError(f"unknown operation id '{name}'; known: {sorted(OPS)}") from None
    if name == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


__all__ = ["OPS", "forward_op", "Tensor"] + [k.replace("-last-axis", "") for k in OPS]
