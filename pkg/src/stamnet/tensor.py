"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations record their inputs and a
backward closure on the output; ``Tensor.backward()`` replays those closures
in reverse topological order, accumulating into ``.grad`` buffers of the
leaves. Exactly the operations the gesture model needs are provided; there
is no broadcasting support beyond batched matmul and the bias/table adds
the model performs (handled by gradient un-broadcasting).
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DataError, GeometryError, ShapeError

# Additive logit value used to block attention positions. Softmax treats a row
# whose entries all sit at (or below) this level as fully masked.
MASK_SENTINEL = -1e9
_SENTINEL_THRESHOLD = MASK_SENTINEL / 2

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "all_masked_rows")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None,
                 _check=True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and arr.size and not np.isfinite(arr).all():
            raise DataError("tensor contains non-finite values (NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = _parents if self.requires_grad else ()
        self._backward_fn = _backward_fn if self.requires_grad else None
        # leaves carry a zero buffer from the start; interior nodes allocate
        # lazily on first accumulation (they are transient per forward pass)
        self.grad = np.zeros_like(arr) if self.requires_grad and not _parents else None
        self.all_masked_rows = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor(self.data, requires_grad=False, _check=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions carry the real semantics
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Populate ``.grad`` of every reachable requires_grad tensor.

        Must be called on a scalar (shape ``()``); gradients accumulate in
        exact reverse execution order, so repeated subexpressions are handled
        correctly and results are deterministic.
        """
        if self.data.shape != ():
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones(()))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(data, parents, backward_fn):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _backward_fn=backward_fn if req else None)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style batch broadcasting on leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """Affine map along the last axis: x @ w + b."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    out_data = np.where(keep, x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * keep)

    return _make(out_data, (x,), backward)


def leaky_relu(x, slope=0.1) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out_data = np.where(pos, x.data, slope * x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * np.where(pos, 1.0, slope))

    return _make(out_data, (x,), backward)


def dropout(x, rate, training, rng=None) -> Tensor:
    """Inverted dropout: surviving entries scaled by 1/(1-rate); identity in eval."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode requires an explicit rng")
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out_data = x.data * mask

    def backward(g):
        if x.requires_grad:
            x._accum(g * mask)

    return _make(out_data, (x,), backward)


def softmax(x, axis=-1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Rows whose entries all sit at the mask sentinel (fully blocked attention
    rows) come back as zeros and are flagged on the result rather than
    producing a spurious uniform distribution.
    """
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = e / s
    blocked = m <= _SENTINEL_THRESHOLD
    flagged = None
    if blocked.any():
        out_data = np.where(blocked, 0.0, out_data)
        flagged = np.broadcast_to(blocked, x.data.shape).copy()
        warnings.warn("softmax saw fully masked rows; returning zeros for them",
                      RuntimeWarning, stacklevel=2)
    y = out_data

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - inner))

    out = _make(out_data, (x,), backward)
    out.all_masked_rows = flagged
    return out


def layernorm(x, gain, bias, eps=1e-5) -> Tensor:
    """Zero-mean unit-variance over the last (channel) axis, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError(f"layernorm eps must be > 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    sum_axes = tuple(range(out_data.ndim - 1))

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=sum_axes))
        if bias.requires_grad:
            bias._accum(g.sum(axis=sum_axes))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gh - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), backward)


def concat(tensors, axis) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != ax):
            raise ShapeError(
                f"concat shapes disagree off axis {axis}: {tensors[0].shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def mean(x, axis) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis)
    count = x.data.shape[axis] if isinstance(axis, int) else int(
        np.prod([x.data.shape[a] for a in axis]))

    def backward(g):
        if x.requires_grad:
            x._accum(np.expand_dims(g, axis) / count)

    return _make(out_data, (x,), backward)


def tsum(x) -> Tensor:
    """Sum of all entries (scalar result)."""
    x = as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            x._accum(g)

    return _make(out_data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out_data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accum(np.transpose(g, inverse))

    return _make(out_data, (x,), backward)


def _conv_geometry(t, k, stride, padding):
    if k < 1 or stride < 1 or padding < 0:
        raise GeometryError(f"invalid conv geometry k={k} stride={stride} padding={padding}")
    if k > t + 2 * padding:
        raise GeometryError(
            f"kernel {k} longer than padded temporal extent {t + 2 * padding}")
    return (t + 2 * padding - k) // stride + 1


def _promote4d(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected [C,T,N] or [B,C,T,N], got shape {x.shape}")


def _windows(xp, k, stride):
    # xp: [B,C,Tp,N] -> [B,C,T',N,k] sliding views along the temporal axis
    w = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    return w[:, :, ::stride]


def conv_temporal(x, kernel, bias=None, stride=1, padding=0, groups=1) -> Tensor:
    """Temporal (k x 1) convolution over [.., C, T, N]; joint axis untouched.

    ``groups == 1`` mixes all channels (pointwise when k == 1); ``groups ==
    C_in == C_out`` is the per-channel depthwise case. Kernel layout is
    [C_out, C_in/groups, k].
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    x4, squeeze = _promote4d(x)
    _, c_in, t, _ = x4.shape
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be [C_out, C_in/groups, k], got {kernel.shape}")
    c_out, c_per, k = kernel.shape
    depthwise = groups == c_in and groups == c_out and c_in == c_out
    if groups == 1:
        if c_per != c_in:
            raise ShapeError(
                f"kernel {kernel.shape} does not match input channels {c_in} for groups=1")
    elif depthwise:
        if c_per != 1:
            raise ShapeError(f"depthwise kernel must be [C,1,k], got {kernel.shape}")
    else:
        raise ContractError(
            f"unsupported groups={groups} for C_in={c_in}, C_out={c_out} "
            "(only full-mix and depthwise convolutions are provided)")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    t_out = _conv_geometry(t, k, stride, padding)

    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (0, 0)))
    win = _windows(xp, k, stride)  # [B,C,T',N,k]
    if depthwise:
        out = np.einsum("bctnk,ck->bctn", win, kernel.data[:, 0, :], optimize=True)
    else:
        out = np.einsum("bctnk,dck->bdtn", win, kernel.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out_data = out[0] if squeeze else out

    def backward(g):
        g4 = g[None] if squeeze else g
        if bias is not None and bias.requires_grad:
            bias._accum(g4.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            if depthwise:
                kernel._accum(np.einsum("bctn,bctnk->ck", g4, win,
                                        optimize=True)[:, None, :])
            else:
                kernel._accum(np.einsum("bdtn,bctnk->dck", g4, win, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                sl = slice(j, j + stride * (t_out - 1) + 1, stride)
                if depthwise:
                    gxp[:, :, sl, :] += g4 * kernel.data[None, :, 0, j, None, None]
                else:
                    gxp[:, :, sl, :] += np.einsum("bdtn,dc->bctn", g4,
                                                  kernel.data[:, :, j], optimize=True)
            gx = gxp[:, :, padding:padding + t, :]
            x._accum(gx[0] if squeeze else gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, parents, backward)


def maxpool_temporal(x, k, stride=1, padding=0) -> Tensor:
    """Windowed max along the temporal axis; -inf padding; first index wins ties."""
    x = as_tensor(x)
    x4, squeeze = _promote4d(x)
    b, c, t, n = x4.shape
    t_out = _conv_geometry(t, k, stride, padding)
    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (0, 0)),
                constant_values=-np.inf)
    win = _windows(xp, k, stride)  # [B,C,T',N,k]
    arg = win.argmax(axis=-1)      # first maximal index on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out_data = out[0] if squeeze else out

    def backward(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros((b, c, t + 2 * padding, n))
        bi, ci, ti, ni = np.indices((b, c, t_out, n), sparse=False)
        pos = arg + ti * stride
        np.add.at(gxp, (bi, ci, pos, ni), g4)
        gx = gxp[:, :, padding:padding + t, :]
        if x.requires_grad:
            x._accum(gx[0] if squeeze else gx)

    return _make(out_data, (x,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, n_classes], got {logits.shape}")
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= n:
        raise DataError(f"label out of range [0,{n}): {labels.min()}..{labels.max()}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out_data = np.asarray(-logp[np.arange(b), labels].mean())
    p = np.exp(logp)

    def backward(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[np.arange(b), labels] -= 1.0
            logits._accum(g * gl / b)

    return _make(out_data, (logits,), backward)
