"""Minimal dense-tensor engine with reverse-mode differentiation.

All values are 64-bit floats. Every forward op validates that its output is
finite; NaN/Inf on finite inputs is a hard error. Gradients are accumulated
by a single topologically ordered backward sweep from a scalar loss.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "concat",
    "dilated_conv1d",
    "quantile_loss",
]


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _matmul_accum(x, y, target_shape):
    """x @ y, summing batch axes where `target_shape` is broadcast.

    Plain `x @ y` followed by _unbroadcast would materialize the full
    broadcast product; for a small weight shared over large batch axes
    that intermediate can be orders of magnitude bigger than either
    operand. Contract the summed axes inside einsum instead.
    """
    batch = tuple(np.broadcast_shapes(x.shape[:-2], y.shape[:-2]))
    t_batch = tuple(target_shape[:-2])
    if t_batch == batch:
        return x @ y
    nb = len(batch)
    off = nb - len(t_batch)
    keep = [i for i in range(nb) if i >= off and t_batch[i - off] == batch[i]]
    red = [i for i in range(nb) if i not in keep]
    m, k, p = x.shape[-2], x.shape[-1], y.shape[-1]
    xb = np.broadcast_to(x, batch + (m, k))
    yb = np.broadcast_to(y, batch + (k, p))
    # sum_red x @ y == one matmul with the reduced axes folded into the
    # contraction axis (block-row times block-column)
    xt = np.ascontiguousarray(np.transpose(xb, keep + [nb] + red + [nb + 1]))
    yt = np.ascontiguousarray(np.transpose(yb, keep + red + [nb, nb + 1]))
    kshape = tuple(batch[i] for i in keep)
    rsize = int(np.prod([batch[i] for i in red], dtype=int))
    out = xt.reshape(kshape + (m, rsize * k)) @ yt.reshape(
        kshape + (rsize * k, p))
    return out.reshape(t_batch + (m, p))


class Tensor:
    """Dense float64 array that optionally participates in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100  # keep numpy from hijacking arithmetic

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # grad buffers are allocated lazily on first accumulation; eager
        # zeros here would allocate one per intermediate op output
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction of graph nodes -------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        _check_finite(data, op)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out = cls(data, requires_grad=True)
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out = cls(data)
        return out

    # -- bookkeeping -----------------------------------------------------

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
            self.grad[...] = 0.0

    def _accum_grad(self, g):
        if self.grad is None:
            # copy: g may alias another parent's gradient or a view
            self.grad = np.array(g)
        else:
            self.grad += g

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad tensor.

        `self` must be a scalar. Repeated calls without zeroing grads
        accumulate.
        """
        if self.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        if not self.requires_grad:
            raise ValueError("loss does not require grad; nothing to do")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum_grad(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None and not parent._parents:
                    parent._accum_grad(pg)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._lift(other)
        data = self.data + other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return Tensor._from_op(data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        data = self.data - other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return Tensor._from_op(data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        def backward(g):
            return (-g,)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __mul__(self, other):
        other = self._lift(other)
        data = self.data * other.data
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._from_op(data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        data = self.data / other.data
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._from_op(data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        data = self.data**p

        def backward(g):
            return (g * p * self.data ** (p - 1),)

        return Tensor._from_op(data, (self,), backward, "pow")

    # -- matmul ----------------------------------------------------------

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.ndim == 0 or b.ndim == 0:
            raise ValueError("matmul requires at least 1-D operands")
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ValueError(
                f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
            )
        data = a.data @ b.data

        def backward(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1:
                ad = ad[None, :]
            if bd.ndim == 1:
                bd = bd[:, None]
            gm = np.asarray(g)
            if b.ndim == 1:
                gm = gm[..., None]
            if a.ndim == 1:
                gm = gm[..., None, :]
            ga = _matmul_accum(gm, np.swapaxes(bd, -1, -2), ad.shape)
            gb = _matmul_accum(np.swapaxes(ad, -1, -2), gm, bd.shape)
            if a.ndim == 1:
                ga = np.squeeze(ga, -2)
            if b.ndim == 1:
                gb = np.squeeze(gb, -1)
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor._from_op(data, (self, other), backward, "matmul")

    # -- nonlinearities and reductions -----------------------------------

    def relu(self):
        mask = self.data > 0
        data = np.where(mask, self.data, 0.0)

        def backward(g):
            return (g * mask,)

        return Tensor._from_op(data, (self,), backward, "relu")

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            return (g * data,)

        return Tensor._from_op(data, (self,), backward, "exp")

    def log(self):
        data = np.log(self.data)

        def backward(g):
            return (g / self.data,)

        return Tensor._from_op(data, (self,), backward, "log")

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            return (g * 0.5 / data,)

        return Tensor._from_op(data, (self,), backward, "sqrt")

    def abs(self):
        sign = np.sign(self.data)
        data = np.abs(self.data)

        def backward(g):
            return (g * sign,)

        return Tensor._from_op(data, (self,), backward, "abs")

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return Tensor._from_op(data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def softmax(self, axis=-1):
        """Stable softmax along `axis`; rows sum to 1."""
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        return Tensor._from_op(data, (self,), backward, "softmax")

    # -- shaping ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(self.shape),)

        return Tensor._from_op(data, (self,), backward, "reshape")

    def swapaxes(self, a, b):
        data = np.swapaxes(self.data, a, b)

        def backward(g):
            return (np.swapaxes(g, a, b),)

        return Tensor._from_op(data, (self,), backward, "swapaxes")

    def expand_dims(self, axis):
        data = np.expand_dims(self.data, axis)

        def backward(g):
            return (np.squeeze(g, axis),)

        return Tensor._from_op(data, (self,), backward, "expand_dims")

    def __getitem__(self, key):
        data = self.data[key]

        def backward(g):
            out = np.zeros_like(self.data)
            out[key] = g
            return (out,)

        return Tensor._from_op(data, (self,), backward, "slice")

    def pad_axis(self, axis, before, after):
        """Zero-pad one axis."""
        widths = [(0, 0)] * self.ndim
        widths[axis] = (before, after)
        data = np.pad(self.data, widths)
        sl = [slice(None)] * self.ndim
        sl[axis] = slice(before, before + self.shape[axis])
        sl = tuple(sl)

        def backward(g):
            return (g[sl],)

        return Tensor._from_op(data, (self,), backward, "pad")

    def take_pairs(self, rows, cols):
        """Gather out[..., i, j, :] = self[..., rows[i, j], cols[i, j], :].

        (rows, cols) must be an injective index map so the backward scatter
        needs no duplicate accumulation.
        """
        data = self.data[..., rows, cols, :]

        def backward(g):
            out = np.zeros_like(self.data)
            out[..., rows, cols, :] = g
            return (out,)

        return Tensor._from_op(data, (self,), backward, "take_pairs")

    def gather_time(self, idx):
        """Gather rows of axis 1: out[b, ..., :] = self[b, idx[...], :].

        self: (B, T, d); idx: integer array of any shape; out has shape
        (B, *idx.shape, d). Duplicate indices are handled by scatter-add in
        the backward pass.
        """
        idx = np.asarray(idx)
        data = self.data[:, idx, :]

        def backward(g):
            out = np.zeros_like(self.data)
            # accumulate time-first so np.add.at can index axis 0
            out_t = np.moveaxis(out, 1, 0)
            g_t = np.moveaxis(g.reshape(g.shape[0], -1, g.shape[-1]), 1, 0)
            np.add.at(out_t, idx.ravel(), g_t)
            return (out,)

        return Tensor._from_op(data, (self,), backward, "gather_time")

    def scatter_pairs(self, rows, cols, n_rows):
        """Scatter out[..., rows[i, j], cols[i, j], :] = self[..., i, j, :].

        self: (..., I, J, d); rows/cols: (I, J) with an injective joint map;
        unwritten cells of the (n_rows, max_col+1) output stay zero.
        """
        n_cols = self.shape[-2]
        out_shape = self.shape[:-3] + (n_rows, n_cols, self.shape[-1])
        data = np.zeros(out_shape)
        data[..., rows, cols, :] = self.data

        def backward(g):
            return (g[..., rows, cols, :],)

        return Tensor._from_op(data, (self,), backward, "scatter_pairs")

    def dropout(self, p, rng):
        """Inverted dropout; identity when p == 0 or grads are disabled."""
        if p < 0 or p >= 1:
            raise ValueError("dropout rate must be in [0, 1)")
        if p == 0.0:
            return self
        mask = (rng.random(self.shape) >= p) / (1.0 - p)
        data = self.data * mask

        def backward(g):
            return (g * mask,)

        return Tensor._from_op(data, (self,), backward, "dropout")


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis=0):
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor._from_op(data, tensors, backward, "concat")


def dilated_conv1d(x, kernel, dilation, mode="causal"):
    """Dilated 1-D convolution over the time axis.

    x: (..., T, c_in); kernel: (w, c_in, c_out). Causal mode left-pads with
    zeros so output t sees x[t - d*(w-1) .. t]. Bidirectional mode centers
    the window at t (odd w required) with symmetric zero padding.
    """
    x = Tensor._lift(x)
    kernel = Tensor._lift(kernel)
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    w = kernel.shape[0]
    if w < 1:
        raise ValueError("kernel width must be >= 1")
    t_axis = x.ndim - 2
    if mode == "causal":
        before, after = dilation * (w - 1), 0
    elif mode == "bidirectional":
        if w % 2 == 0:
            raise ValueError("bidirectional mode requires an odd kernel width")
        half = dilation * (w // 2)
        before, after = half, half
    else:
        raise ValueError(f"unknown conv mode: {mode}")

    T = x.shape[t_axis]
    xp = x.pad_axis(t_axis, before, after)
    out = None
    for j in range(w):
        sl = [slice(None)] * x.ndim
        sl[t_axis] = slice(j * dilation, j * dilation + T)
        term = xp[tuple(sl)] @ kernel[j]
        out = term if out is None else out + term
    return out


def quantile_loss(y, y_hat, q):
    """Pinball loss q*(y - y_hat)_+ + (1-q)*(y_hat - y)_+, elementwise.

    The subgradient w.r.t. y_hat at a tie is 0 (relu backward at 0).
    """
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    y = Tensor._lift(y)
    y_hat = Tensor._lift(y_hat)
    return (y - y_hat).relu() * q + (y_hat - y).relu() * (1.0 - q)
