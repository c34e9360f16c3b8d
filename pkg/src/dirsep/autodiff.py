"""Minimal reverse-mode autodiff over the tensor ops the separator needs.

Values are float32 numpy arrays; reductions accumulate in float64 before
casting back. Ops record a closure onto a tape only while gradients are
enabled and some input requires them, so inference runs at plain numpy
speed. Shapes follow the separator's conventions: time-major feature
matrices (frames, channels), optionally with a leading batch axis.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operator sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out._parents = parents
        out._backward_fn = backward_fn
        out.requires_grad = True
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to the given (broadcast-source) shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32)


# ------------------------------------------------------------------ basics


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    inv = 1.0 / b.data

    def bwd(g):
        return (_unbroadcast(g * inv, a.shape),
                _unbroadcast(-g * a.data * inv * inv, b.shape))

    return _node(a.data * inv, (a, b), bwd)


def scale(a, c: float):
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        return (np.float32(c) * g,)

    return _node(a.data * np.float32(c), (a,), bwd)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def matmul(a, b):
    """a (..., M) @ b (M, N); b is a 2-D weight matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        ga = g @ b.data.T if need_a else None
        if need_b:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = None
        return ga, gb

    return _node(out, (a, b), bwd)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # gradient at exactly 0 is defined as 0

    def bwd(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def log(a):
    a = _as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    """Sum with float64 accumulation."""
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(np.float32)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(np.float32),)

    return _node(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def slice_rows(a, start: int, end: int):
    """View rows [start, end) of a 2-D matrix (used to address weight blocks)."""
    a = _as_tensor(a)

    def bwd(g):
        buf = np.zeros(a.shape, dtype=np.float32)
        buf[start:end] = g
        return (buf,)

    return _node(np.ascontiguousarray(a.data[start:end]), (a,), bwd)


def take(a, index: int, axis: int):
    """Select one slice along axis (used to peel per-source planes)."""
    a = _as_tensor(a)

    def bwd(g):
        buf = np.zeros(a.shape, dtype=np.float32)
        sl = [slice(None)] * len(a.shape)
        sl[axis] = index
        buf[tuple(sl)] = g
        return (buf,)

    sl = [slice(None)] * len(a.shape)
    sl[axis] = index
    return _node(np.ascontiguousarray(a.data[tuple(sl)]), (a,), bwd)


def expand_time(a, t: int):
    """(..., F) -> (..., t, F) by repeating along a new time axis."""
    a = _as_tensor(a)
    out = np.broadcast_to(np.expand_dims(a.data, -2), a.shape[:-1] + (t, a.shape[-1]))

    def bwd(g):
        return (g.sum(axis=-2).astype(np.float32),)

    return _node(np.ascontiguousarray(out), (a,), bwd)


# ------------------------------------------------------------ convolution


def conv1d(x, w, bias=None, dilation: int = 1):
    """Same-length 1-D convolution over time with symmetric zero padding.

    x: (..., T, Cin); w: (k, Cin, Cout); bias: (Cout,) or None. The kernel
    size must be odd so the output stays centered. Implemented as a
    gather into (..., T, k*Cin) columns followed by one matmul, which is
    also exactly how the gradient propagates back.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    k, cin, cout = w.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ValueError(f"input channels {x.shape[-1]} != kernel channels {cin}")
    t = x.shape[-2]
    pad = (k - 1) // 2 * dilation
    pad_spec = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    cols = np.concatenate([xp[..., i * dilation:i * dilation + t, :] for i in range(k)],
                          axis=-1)
    w2 = w.data.reshape(k * cin, cout)
    out = cols @ w2
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data

    need_x = _needs_grad(x)

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
        if need_x:
            gcols = g @ w2.T
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[..., i * dilation:i * dilation + t, :] += gcols[..., i * cin:(i + 1) * cin]
            gx = np.ascontiguousarray(gxp[..., pad:pad + t, :] if pad else gxp)
        else:
            gx = None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0, dtype=np.float64).astype(np.float32)
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, bwd)


# ------------------------------------------------------- overlap-add


def overlap_add_rows(x, hop: int, origin_length: int):
    """(..., T, L) frames -> (..., origin_length) waveform by raw summation.

    The adjoint is exactly the framing gather, so round trips through
    segment/overlap-add differentiate cleanly.
    """
    x = _as_tensor(x)
    t, fl = x.shape[-2], x.shape[-1]
    padded_len = (t - 1) * hop + fl
    if origin_length > padded_len:
        raise ValueError(f"origin_length {origin_length} exceeds frame span {padded_len}")
    idx = (np.arange(fl)[None, :] + hop * np.arange(t)[:, None])
    phases = int(np.ceil(fl / hop))

    def forward(frames):
        lead = frames.shape[:-2]
        buf = np.zeros(lead + (padded_len,), dtype=np.float64)
        for p in range(phases):
            sub = frames[..., p::phases, :]
            if sub.shape[-2] == 0:
                continue
            flat = idx[p::phases].ravel()
            buf[..., flat] += sub.reshape(lead + (-1,))
        return buf[..., :origin_length].astype(np.float32)

    def bwd(g):
        gp = np.zeros(g.shape[:-1] + (padded_len,), dtype=np.float32)
        gp[..., :origin_length] = g
        return (gp[..., idx],)

    return _node(forward(x.data), (x,), bwd)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from loss.

    The loss must be scalar. The tape is freed afterwards; calling
    backward twice on the same graph raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward_fn = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# -------------------------------------------------------------------- Adam


class Adam:
    """Standard Adam with bias correction; grads are cleared by step()."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("adam step with missing gradient")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (self.lr * update).astype(np.float32)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
