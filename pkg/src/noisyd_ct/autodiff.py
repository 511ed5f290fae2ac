"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every model component in this package is built from the primitives here.
Tensors record their parents during the forward pass; ``backward`` replays
the tape in reverse topological order.  Gradient checks run in float64;
see ``finite_diff_check``.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names the shapes."""


def _shape_err(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the tape only when a parent needs grads."""
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def topo_order(root):
    """Reverse-topological tape under ``root``, each node exactly once."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every reachable tensor with requires_grad=True.

    Frozen tensors (requires_grad=False) are never touched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / linear primitives


def add(a, b):
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), bwd)


def add_bias(x, b):
    """x[..., d] + b[d]."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise _shape_err("add_bias", x.shape, b.shape)

    def bwd(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a):
    if a.data.ndim != 2:
        raise _shape_err("transpose", a.shape)

    def bwd(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), bwd)


def reshape(a, shape):
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bwd)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def swish(a):
    """x * sigmoid(x) (SiLU)."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        _accum(a, g * (sig + out * (1.0 - sig)))

    return _make(out, (a,), bwd)


def softmax(a):
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), bwd)


def log_softmax(a):
    """log softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        _accum(a, g - sm * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bwd)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_err("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        _accum(
            x,
            inv
            * (
                gg
                - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            ),
        )
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))

    return _make(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x, w, b, stride=1, padding=0):
    """x: (C_in, H, W); w: (C_out, C_in, kh, kw); b: (C_out,)."""
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise _shape_err("conv2d", x.shape, w.shape)
    cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise _shape_err("conv2d (input smaller than kernel)", x.shape, w.shape)
    out = np.broadcast_to(b.data[:, None, None], (cout, Ho, Wo)).copy()
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + s * Ho : s, j : j + s * Wo : s]
            out += np.einsum("oc,chw->ohw", w.data[:, :, i, j], patch)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + s * Ho : s, j : j + s * Wo : s]
                gw[:, :, i, j] = np.einsum("ohw,chw->oc", g, patch)
                gxp[:, i : i + s * Ho : s, j : j + s * Wo : s] += np.einsum(
                    "oc,ohw->chw", w.data[:, :, i, j], g
                )
        _accum(x, gxp[:, p : p + H, p : p + W] if p else gxp)
        _accum(w, gw)
        _accum(b, g.sum(axis=(1, 2)))

    return _make(out, (x, w, b), bwd)


def depthwise_conv1d(x, w, b):
    """x: (t, d); w: (k, d) with odd k; same-padded over time, per-channel."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_err("depthwise_conv1d", x.shape, w.shape)
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    t = x.shape[0]
    half = k // 2
    xp = np.pad(x.data, ((half, half), (0, 0)))
    out = np.broadcast_to(b.data, (t, x.shape[1])).copy()
    for i in range(k):
        out += w.data[i] * xp[i : i + t]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(k):
            gw[i] = (g * xp[i : i + t]).sum(axis=0)
            gxp[i : i + t] += g * w.data[i]
        _accum(x, gxp[half : half + t])
        _accum(w, gw)
        _accum(b, g.sum(axis=0))

    return _make(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# shaping / gathering


def concat_last(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise _shape_err("concat_last", a.shape, b.shape)
    da = a.shape[-1]

    def bwd(g):
        _accum(a, g[..., :da])
        _accum(b, g[..., da:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bwd)


def slice_last(a, lo, hi):
    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[..., lo:hi] = g
        _accum(a, ga)

    return _make(a.data[..., lo:hi].copy(), (a,), bwd)


def rows(a, idx):
    """Gather rows of a 2-D tensor (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise _shape_err("rows", a.shape)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.data[idx], (a,), bwd)


def stack_rows(parts):
    """Stack 1-D tensors of equal length into an (n, d) tensor."""
    d = parts[0].shape[-1]
    for p in parts:
        if p.shape != (d,):
            raise _shape_err("stack_rows", (d,), p.shape)

    def bwd(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _make(np.stack([p.data for p in parts]), tuple(parts), bwd)


def outer_add(a, b):
    """a: (t, d), b: (u, d) -> (t, u, d) with out[i, j] = a[i] + b[j]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise _shape_err("outer_add", a.shape, b.shape)

    def bwd(g):
        _accum(a, g.sum(axis=1))
        _accum(b, g.sum(axis=0))

    return _make(a.data[:, None, :] + b.data[None, :, :], (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(a.data.sum(), (a,), bwd)


def mean_all(a):
    n = a.data.size

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _make(a.data.mean(), (a,), bwd)


def mean_square(a):
    """mean(x^2) over all elements."""
    n = a.data.size

    def bwd(g):
        _accum(a, (2.0 / n) * float(g) * a.data)

    return _make((a.data**2).mean(), (a,), bwd)


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        _accum(x, g * keep)

    return _make(x.data * keep, (x,), bwd)


# ---------------------------------------------------------------------------
# recurrent step


def lstm_step(x, h, c, w_ih, w_hh, b):
    """One LSTM cell step.

    x: (1, d_in); h, c: (1, n); w_ih: (d_in, 4n); w_hh: (n, 4n); b: (4n,).
    Gate order: input, forget, cell, output.  Returns (h', c').
    """
    n = h.shape[1]
    if w_ih.shape != (x.shape[1], 4 * n) or w_hh.shape != (n, 4 * n) or b.shape != (4 * n,):
        raise _shape_err("lstm_step", x.shape, h.shape, w_ih.shape, w_hh.shape, b.shape)
    gates = add_bias(add(matmul(x, w_ih), matmul(h, w_hh)), b)
    i = sigmoid(slice_last(gates, 0, n))
    f = sigmoid(slice_last(gates, n, 2 * n))
    g = tanh(slice_last(gates, 2 * n, 3 * n))
    o = sigmoid(slice_last(gates, 3 * n, 4 * n))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, x, eps=1e-5, coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the Tensor ``x`` to a scalar Tensor.  Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).  ``coords`` optionally limits
    the check to that many randomly chosen coordinates (``rng`` required).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    if coords is not None and coords < flat.size:
        idxs = rng.choice(flat.size, size=coords, replace=False)
    else:
        idxs = range(flat.size)
    amax = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        amax = max(amax, err)
    return amax
