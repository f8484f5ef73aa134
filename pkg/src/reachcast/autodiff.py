"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The engine is deliberately small: a ``Tensor`` wraps a contiguous numpy
array, every operation records itself on the active ``Graph`` (a tape),
and ``Graph.backward`` replays the tape once in reverse. Graphs are
rebuilt on every forward pass, which keeps recursive loops (the state
transition, the autoregressive emission) trivially correct.

A graph and its tensors belong to one thread; weight tensors may be
shared read-only across threads running independent graphs.
"""

from __future__ import annotations

import threading

import numpy as np

_POINTWISE_KINDS = ("tanh", "softplus", "exp", "relu", "neg-exp")

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Backward called on an invalid target or outside a graph."""


def _tape():
    return getattr(_state, "tape", None)


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def grad_or_zeros(self):
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


class Graph:
    """Tape of op records; execution order is a topological order.

    Entering the graph makes it the thread's active tape. ``backward``
    replays the records once, in reverse, accumulating gradients in a
    fixed order so repeated passes are bit-identical.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        if _tape() is not None:
            raise GraphError("a graph is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def backward(self, loss):
        if loss.data.size != 1:
            raise GraphError(f"backward target must be scalar, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise GraphError("backward target does not depend on any gradient-requiring tensor")
        loss.grad = np.ones_like(loss.data)
        for out, _inputs, bwd in reversed(self._records):
            if out.grad is not None:
                bwd(out.grad)

    def zero_grads(self):
        for out, inputs, _bwd in self._records:
            out.grad = None
            for t in inputs:
                t.grad = None

    def __len__(self):
        return len(self._records)


def _accum(t, g):
    """Accumulate a gradient the caller may still alias (copies on first use)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _accum_new(t, g):
    """Accumulate a freshly-allocated gradient the caller hands over."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _record(out_data, inputs, bwd):
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((out, inputs, bwd))
    return out


def _reduce_to_shape(g, shape):
    """Sum a gradient over dimensions that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum_new(b, -g)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def bwd(g):
        _accum_new(a, g * b.data)
        _accum_new(b, g * a.data)

    return _record(a.data * b.data, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        _accum_new(a, g * s)

    return _record(a.data * s, (a,), bwd)


def add_bias(x, b):
    """x + b with b broadcast over all leading axes (b.shape == x.shape[-1:])."""
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not match last axis of {x.data.shape}")

    def bwd(g):
        _accum(x, g)
        _accum_new(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(x.data + b.data, (x, b), bwd)


def matmul(a, b):
    """Matrix product with numpy batch semantics on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul: operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.data.shape} x {b.data.shape} do not match")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum_new(a, np.ascontiguousarray(_reduce_to_shape(ga, a.data.shape)))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum_new(b, np.ascontiguousarray(_reduce_to_shape(gb, b.data.shape)))

    return _record(out_data, (a, b), bwd)


def affine(x, w, b):
    """x @ w + b in one op; w is 2-D (d_in, d_out), b is (d_out,)."""
    if w.data.ndim != 2 or b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine: bad weight/bias shapes {w.data.shape}, {b.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"affine: inner extents {x.data.shape} x {w.data.shape} do not match")
    out_data = x.data @ w.data + b.data

    def bwd(g):
        if x.requires_grad:
            _accum_new(x, g @ w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            _accum_new(w, x.data.reshape(-1, x.data.shape[-1]).T @ g2)
        if b.requires_grad:
            _accum_new(b, g2.sum(axis=0))

    return _record(out_data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _record(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    axes = tuple(int(ax) for ax in axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _record(a.data.transpose(axes), (a,), bwd)


def swap_last2(a):
    ndim = a.data.ndim
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def split_heads(x, heads):
    """(N, T, D) -> (N, heads, T, D/heads) in one op."""
    n, t, d = x.data.shape
    if d % heads:
        raise ShapeError(f"split_heads: {d} not divisible by {heads}")
    dh = d // heads
    out = np.ascontiguousarray(x.data.reshape(n, t, heads, dh).transpose(0, 2, 1, 3))

    def bwd(g):
        _accum_new(x, np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(n, t, d))

    return _record(out, (x,), bwd)


def merge_heads(x):
    """(N, heads, T, dh) -> (N, T, heads*dh) in one op."""
    n, h, t, dh = x.data.shape
    out = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(n, t, h * dh)

    def bwd(g):
        _accum_new(x, np.ascontiguousarray(g.reshape(n, t, h, dh).transpose(0, 2, 1, 3)))

    return _record(out, (x,), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = int(axis) % tensors[0].data.ndim
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: non-concat extents differ: {ref} vs {s}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def slice_axis(a, axis, start, stop):
    axis = int(axis)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum_new(a, full)

    return _record(a.data[idx].copy(), (a,), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.data.ndim,)
    else:
        axes = tuple(ax % a.data.ndim for ax in axis)
    kept = a.data.sum(axis=axes, keepdims=True)
    out_data = kept if keepdims else kept.reshape(
        [n for i, n in enumerate(a.data.shape) if i not in axes]
    )
    kept_shape = kept.shape

    def bwd(g):
        _accum(a, np.broadcast_to(g.reshape(kept_shape), a.data.shape))

    return _record(out_data, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.data.shape[axis]
    else:
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_lastdim(x):
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: last extent must be >= 1")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum_new(x, s * (g - dot))

    return _record(s, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = g.reshape(-1, d)
        if gain.requires_grad:
            _accum_new(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum_new(bias, lead.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum_new(x, inv * (gx - m1 - xhat * m2))

    return _record(out, (x, gain, bias), bwd)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pointwise(x, kind):
    """Elementwise map; one of tanh | softplus | exp | relu | neg-exp."""
    if kind == "tanh":
        out = np.tanh(x.data)
        dfn = lambda: 1.0 - out * out
    elif kind == "softplus":
        out = np.logaddexp(0.0, x.data)
        dfn = lambda: _sigmoid(x.data)
    elif kind == "exp":
        out = np.exp(x.data)
        dfn = lambda: out
    elif kind == "relu":
        out = np.maximum(0.0, x.data)
        dfn = lambda: (x.data > 0).astype(np.float64)
    elif kind == "neg-exp":
        out = np.exp(-x.data)
        dfn = lambda: -out
    else:
        raise ValueError(f"pointwise: unknown kind {kind!r}, expected one of {_POINTWISE_KINDS}")

    def bwd(g):
        _accum_new(x, g * dfn())

    return _record(out, (x,), bwd)


def tanh(x):
    return pointwise(x, "tanh")


def softplus(x):
    return pointwise(x, "softplus")


def exp(x):
    return pointwise(x, "exp")


def relu(x):
    return pointwise(x, "relu")


def neg_exp(x):
    return pointwise(x, "neg-exp")


def huber(x, delta):
    """Elementwise Huber penalty: 0.5 x^2 inside |x| <= delta, linear outside."""
    if delta <= 0:
        raise ValueError("huber: delta must be > 0")
    a = np.abs(x.data)
    out = np.where(a <= delta, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))

    def bwd(g):
        _accum_new(x, g * np.clip(x.data, -delta, delta))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# structured ops for the frame encoder


def conv2d(x, k, stride):
    """Valid-padding strided convolution; x: (N,C,H,W), k: (O,C,kh,kw).

    Implemented as im2col plus one matrix product so desk-scale batches
    spend their time in BLAS rather than op dispatch.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError("conv2d: x must be (N,C,H,W) and k (O,C,kh,kw)")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = k.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: channel mismatch {c} vs {ck}")
    stride = int(stride)
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d: kernel larger than input")

    cols = np.empty((n, oh, ow, c, kh, kw))
    for di in range(kh):
        for dj in range(kw):
            patch = x.data[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
            cols[:, :, :, :, di, dj] = patch.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(n * oh * ow, c * kh * kw)
    kmat = k.data.reshape(o, c * kh * kw).T
    out = (cols2 @ kmat).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, oh, ow, c, kh, kw)
            gx = np.zeros_like(x.data)
            for di in range(kh):
                for dj in range(kw):
                    gx[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += (
                        dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            _accum_new(x, gx)
        if k.requires_grad:
            _accum_new(k, (g2.T @ cols2).reshape(o, c, kh, kw))

    return _record(out, (x, k), bwd)


def embed_border(frames, prompt, pad):
    """Pad frames with a learnable pixel border.

    frames: (N,C,H,W); prompt: (C, n_border) with
    n_border = (H+2*pad)*(W+2*pad) - H*W. The same border values are
    shared by every frame in the batch; their gradient sums over it.
    """
    pad = int(pad)
    if pad == 0:
        def bwd0(g):
            _accum(frames, g)

        return _record(frames.data.copy(), (frames, prompt), bwd0)
    n, c, h, w = frames.data.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    n_border = hp * wp - h * w
    if prompt.data.shape != (c, n_border):
        raise ShapeError(f"embed_border: prompt must be ({c}, {n_border}), got {prompt.data.shape}")
    border = np.ones((hp, wp), dtype=bool)
    border[pad:-pad, pad:-pad] = False
    out = np.empty((n, c, hp, wp))
    out[:, :, border] = prompt.data
    out[:, :, pad:-pad, pad:-pad] = frames.data

    def bwd(g):
        _accum(frames, g[:, :, pad:-pad, pad:-pad])
        _accum_new(prompt, g[:, :, border].sum(axis=0))

    return _record(out, (frames, prompt), bwd)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckEntry:
    __slots__ = ("name", "max_rel_err", "n_checked", "passed")

    def __init__(self, name, max_rel_err, n_checked, passed):
        self.name = name
        self.max_rel_err = max_rel_err
        self.n_checked = n_checked
        self.passed = passed


class GradCheckReport:
    """Per-tensor relative errors of analytic vs central-difference grads."""

    def __init__(self, entries, tolerance):
        self.entries = entries
        self.tolerance = tolerance
        self.passed = all(e.passed for e in entries)

    def lines(self):
        out = []
        for e in self.entries:
            status = "pass" if e.passed else "FAIL"
            out.append(f"{status}  {e.name:32s} max_rel_err={e.max_rel_err:.3e} checked={e.n_checked}")
        return out


def check_gradients(build, inputs, step=1e-6, tolerance=1e-5, max_checks_per_tensor=None, seed=0):
    """Compare reverse-mode gradients of ``build()`` against central differences.

    ``build`` constructs and returns the scalar loss from the given input
    tensors; it is re-run for every finite-difference probe. ``inputs``
    maps name -> Tensor. When ``max_checks_per_tensor`` is set, a seeded
    subsample of coordinates is probed in each tensor; otherwise all.
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be > 0")
    items = list(inputs.items())
    with Graph() as g:
        loss = build()
        if loss.requires_grad:
            g.backward(loss)
    grads = {name: t.grad_or_zeros().copy() for name, t in items}
    for _, t in items:
        t.grad = None

    rng = np.random.default_rng(seed)
    entries = []
    for name, t in items:
        n = t.data.size
        if max_checks_per_tensor is not None and n > max_checks_per_tensor:
            idx = np.sort(rng.choice(n, size=max_checks_per_tensor, replace=False))
        else:
            idx = np.arange(n)
        g_ad = grads[name].reshape(-1)
        worst = 0.0
        for i in idx:
            at = np.unravel_index(i, t.data.shape)
            orig = t.data[at]
            t.data[at] = orig + step
            f_plus = float(build().data.reshape(()))
            t.data[at] = orig - step
            f_minus = float(build().data.reshape(()))
            t.data[at] = orig
            g_fd = (f_plus - f_minus) / (2.0 * step)
            rel = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name, worst, len(idx), worst <= tolerance))
    return GradCheckReport(entries, tolerance)
