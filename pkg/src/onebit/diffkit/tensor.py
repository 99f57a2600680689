"""Reverse-mode tape and the differentiable primitives.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every primitive is a thin wrapper
around numpy, which is what inference uses.

    with Tape() as tape:
        loss = ...
    tape.backward(loss, params)
"""

import threading

import numpy as np

from onebit import _kernels
from onebit.errors import DegenerateInput, InvalidArgument, InvalidState

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so the record is already in
    topological order and the backward sweep is a single reversed pass.
    """

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, parents, backward):
        if self._consumed:
            raise InvalidState("tape already consumed by backward(); call reset() first")
        self.nodes.append(_Node(out, parents, backward))

    def reset(self):
        self.nodes = []
        self._consumed = False

    def backward(self, loss, params=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

        Leaves listed in ``params`` that did not take part in the graph get a
        zero gradient. Returns the list of gradients for ``params`` (or an
        empty list).
        """
        if self._consumed:
            raise InvalidState("backward() called twice on the same tape without reset()")
        if loss.data.size != 1:
            raise InvalidArgument(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        owned = {}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            owned.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in owned:
                    owned[key] += pg
                elif key in grads:
                    # first sum allocates a buffer the tape owns; later sums reuse it
                    grads[key] = owned[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves[key] = parent
        if not self.nodes and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            if key in grads:
                leaf.grad = grads[key] if leaf.grad is None else leaf.grad + grads[key]
        self.nodes = []
        if params is None:
            return []
        out = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(x, c):
    """Multiply by a constant (non-differentiable) scalar."""
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum_all(x):
    x = as_tensor(x)
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_last(x):
    """Sum over the last axis, keepdims."""
    x = as_tensor(x)
    return _make(
        np.sum(x.data, axis=-1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
    )


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    return _make(np.mean(x.data), (x,), lambda g: (np.full(x.shape, g / n),))


# ----------------------------------------------------------------------------
# activations


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    s = _kernels.sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def take(x, i):
    """Element ``i`` along axis 0."""
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        out[i] = g
        return (out,)

    return _make(x.data[i], (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise InvalidArgument("concat: shapes disagree off the concatenation axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


# ----------------------------------------------------------------------------
# linear algebra


def dense(x, W, b=None):
    """``x @ W + b`` with ``x: [B, in]``, ``W: [in, out]``, ``b: [out]``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise InvalidArgument(f"dense: cannot apply weight {W.shape} to input {x.shape}")
    out = x.data @ W.data

    def grads(g):
        # skip products nobody will read (constant inputs, e.g. a zero initial state)
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        return gx, gW

    if b is None:
        return _make(out, (x, W), grads)
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise InvalidArgument(f"dense: bias shape {b.shape} does not match {W.shape[1]} outputs")
    out += b.data
    return _make(out, (x, W, b), lambda g: grads(g) + (g.sum(axis=0),))


def bmv(G, x):
    """Batched ``G x`` with ``G: [B, m, n]`` (or ``[m, n]``) and ``x: [B, n]``."""
    G, x = as_tensor(G), as_tensor(x)
    if G.shape[-1] != x.shape[-1]:
        raise InvalidArgument(f"bmv: matrix {G.shape} vs vector {x.shape}")

    def bw(g):
        gG = _unbroadcast(g[..., :, None] * x.data[..., None, :], G.shape) if G.requires_grad else None
        return gG, _unbroadcast(_kernels.bmv_t(G.data, g), x.shape)

    return _make(_kernels.bmv(G.data, x.data), (G, x), bw)


def bmv_t(G, v):
    """Batched ``G^T v`` with ``G: [B, m, n]`` and ``v: [B, m]``."""
    G, v = as_tensor(G), as_tensor(v)
    if G.shape[-2] != v.shape[-1]:
        raise InvalidArgument(f"bmv_t: matrix {G.shape} vs vector {v.shape}")

    def bw(g):
        gG = _unbroadcast(v.data[..., :, None] * g[..., None, :], G.shape) if G.requires_grad else None
        return gG, _unbroadcast(_kernels.bmv(G.data, g), v.shape)

    return _make(_kernels.bmv_t(G.data, v.data), (G, v), bw)


def l2_norm(x):
    """Euclidean norm over the last axis (keepdims)."""
    x = as_tensor(x)
    n = _kernels.l2norm(x.data)
    return _make(n, (x,), lambda g: (g * x.data / n,))


def conv1d_same(x, K, b=None):
    """1-D cross-correlation with zero padding that preserves the length.

    ``x: [B, C_in, L]``, ``K: [C_out, C_in, w]`` (odd ``w``), ``b: [C_out]``.
    """
    x, K = as_tensor(x), as_tensor(K)
    if x.data.ndim != 3 or K.data.ndim != 3 or x.shape[1] != K.shape[1]:
        raise InvalidArgument(f"conv1d: kernel {K.shape} incompatible with input {x.shape}")
    w = K.shape[2]
    if w % 2 == 0:
        raise InvalidArgument("conv1d_same needs an odd kernel width")
    pad = w // 2
    L = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # patches[b, l, c, j] = xp[b, c, l + j]
    patches = np.lib.stride_tricks.sliding_window_view(xp, w, axis=2).transpose(0, 2, 1, 3)
    B, _, Cin, _ = patches.shape
    Cout = K.shape[0]
    cols = patches.reshape(B * L, Cin * w)
    Kmat = K.data.reshape(Cout, Cin * w)
    out = (cols @ Kmat.T).reshape(B, L, Cout).transpose(0, 2, 1)
    parents = (x, K)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Cout,):
            raise InvalidArgument(f"conv1d: bias shape {b.shape} does not match {Cout} channels")
        out = out + b.data[None, :, None]
        parents = (x, K, b)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * L, Cout)
        gK = (g2.T @ cols).reshape(K.shape)
        gcols = (g2 @ Kmat).reshape(B, L, Cin, w)
        gxp = np.zeros_like(xp)
        for j in range(w):
            gxp[:, :, j:j + L] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, pad:pad + L]
        if b is None:
            return gx, gK
        return gx, gK, g.sum(axis=(0, 2))

    return _make(out, parents, bw)


# ----------------------------------------------------------------------------
# normalisation and recurrence


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalisation over axis 0 (and the length axis for ``[B, C, L]``).

    In training mode the running buffers (plain arrays) are updated in place
    with the unbiased batch variance; in eval mode they define a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 3) or x.shape[1] != gamma.shape[0]:
        raise InvalidArgument(f"batchnorm: input {x.shape} vs {gamma.shape[0]} channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1)
    g_ = gamma.data.reshape(bshape)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        a = g_ * inv.reshape(bshape)
        xc = x.data - running_mean.reshape(bshape)
        out = xc * a + beta.data.reshape(bshape)
        return _make(
            out,
            (x, gamma, beta),
            lambda g: (g * a, (g * xc * inv.reshape(bshape)).sum(axis=axes), g.sum(axis=axes)),
        )
    if x.shape[0] < 2:
        raise DegenerateInput("batchnorm in training mode needs a batch of at least 2")
    m = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * (m / (m - 1))

    def bw(g):
        gxhat = g * g_
        gx = inv / m * (
            m * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * g_ + beta.data.reshape(bshape), (x, gamma, beta), bw)


def gru_cell(x, h_prev, p):
    """Standard GRU update.

    ``p`` maps ``W_xr, W_xz, W_xn`` ([in, H]), ``W_hr, W_hz, W_hn`` ([H, H])
    and biases ``b_xr, b_xz, b_xn, b_hr, b_hz, b_hn`` ([H]) to tensors::

        r  = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
        z  = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
        n  = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    h_prev = as_tensor(h_prev)
    r = sigmoid(add(dense(x, p["W_xr"], p["b_xr"]), dense(h_prev, p["W_hr"], p["b_hr"])))
    z = sigmoid(add(dense(x, p["W_xz"], p["b_xz"]), dense(h_prev, p["W_hz"], p["b_hz"])))
    n = tanh(add(dense(x, p["W_xn"], p["b_xn"]), mul(r, dense(h_prev, p["W_hn"], p["b_hn"]))))
    return add(mul(sub(1.0, z), n), mul(z, h_prev))
