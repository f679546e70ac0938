"""Reverse-mode automatic differentiation over dense float64 arrays.

Every numeric primitive the rest of the engine differentiates through lives
here.  The recorded graph is a tape in creation order: each tracked Tensor
remembers its parents and a backward rule, and ``backward()`` replays the
linearized graph exactly once in reverse topological order.

Conventions:
  * all data is float64; gradients are float64 buffers of the same shape
  * calling ``backward()`` twice without ``zero_grad()`` accumulates grads
  * broadcasting follows numpy trailing-dimension alignment; gradients of
    broadcast operands are sum-reduced back to the operand shape
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "tensor", "add", "sub", "mul", "div", "neg", "exp", "log",
    "sqrt", "relu", "sigmoid", "softplus", "sin", "cos", "tanh", "matmul",
    "tsum", "tmean",
    "reshape", "transpose", "concat", "getitem", "gather2d", "pad_hw",
    "cumsum", "softmax", "norm2", "layer_norm", "linear", "no_grad",
    "gradcheck", "GradcheckReport",
]


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """n-dimensional float64 array participating in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={'set' if self.grad is not None else 'none'})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """Value-identical Tensor cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward ---------------------------------------------------------
    def backward(self):
        """Populate ``grad`` of every tracked ancestor of this scalar."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar output, got shape {self.data.shape}")
        order = _toposort(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._bwd is None:
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in pending:
                    pending[pid] = pending[pid] + pg
                else:
                    pending[pid] = pg


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _toposort(root):
    """Creation-order linearization of the subgraph below ``root``."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context manager suspending graph recording (inference / metrics).

    Results computed inside carry no parents, so large renders do not pin
    the whole intermediate graph in memory.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(data, parents, bwd):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g, shape):
    """Sum-reduce a broadcast gradient back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    inv = 1.0 / b.data
    return _make(a.data * inv, (a, b),
                 lambda g: (_unbroadcast(g * inv, a.data.shape),
                            _unbroadcast(-g * a.data * inv * inv, b.data.shape)))


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0  # gradient at exactly 0 is defined as 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = _wrap(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = _wrap(a)
    # log(1+e^x) = max(x,0) + log1p(e^-|x|), overflow-safe
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _make(out, (a,), lambda g: (g * sig,))


def sin(a):
    a = _wrap(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = _wrap(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


# -- reductions and structure ---------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes "
                         f"{a.data.shape} and {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def reshape(a, shape):
    a = _wrap(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bwd)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None)))
               for p in parts)


def getitem(a, idx):
    a = _wrap(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        ga = np.zeros_like(a.data)
        if basic:
            # basic indexing can't alias, so a plain view-accumulate works
            # and avoids the much slower np.add.at path
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), bwd)


def gather2d(fmap, rows, cols):
    """fmap[H, W, C] gathered at integer (rows, cols) -> [..., C].

    Backward scatter-adds into the feature map, so repeated indices
    accumulate correctly.
    """
    fmap = _wrap(fmap)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = fmap.data[rows, cols]

    def bwd(g):
        # group duplicate indices with sort + reduceat; faster than
        # np.add.at for the many-points-few-texels case
        H, W, C = fmap.data.shape
        flat = (rows * W + cols).ravel()
        g2 = np.ascontiguousarray(g).reshape(flat.size, C)
        order = np.argsort(flat, kind="stable")
        uniq, starts = np.unique(flat[order], return_index=True)
        gf = np.zeros((H * W, C))
        gf[uniq] = np.add.reduceat(g2[order], starts, axis=0)
        return (gf.reshape(H, W, C),)

    return _make(out, (fmap,), bwd)


def pad_hw(a, pad):
    """Zero-pad the two leading (spatial) axes of an [H, W, ...] array."""
    a = _wrap(a)
    width = ((pad, pad), (pad, pad)) + ((0, 0),) * (a.data.ndim - 2)
    out = np.pad(a.data, width)

    def bwd(g):
        sl = (slice(pad, g.shape[0] - pad), slice(pad, g.shape[1] - pad))
        return (g[sl],)

    return _make(out, (a,), bwd)


def cumsum(a, axis=-1, exclusive=False):
    a = _wrap(a)
    cs = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = cs - a.data
    else:
        out = cs

    def bwd(g):
        rc = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rc - g if exclusive else rc,)

    return _make(out, (a,), bwd)


def softmax(a, axis=-1):
    """Numerically stabilized softmax along ``axis``."""
    a = _wrap(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = a - np.max(a.data, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / tsum(e, axis=axis, keepdims=True)


def norm2(u, v):
    """sqrt(u**2 + v**2) elementwise, with subgradient 0 at the origin."""
    u, v = _wrap(u), _wrap(v)
    r = np.sqrt(u.data ** 2 + v.data ** 2)

    def bwd(g):
        safe = np.where(r > 0, r, 1.0)
        scale = g / safe
        zero = r == 0
        gu = np.where(zero, 0.0, scale * u.data)
        gv = np.where(zero, 0.0, scale * v.data)
        return gu, gv

    return _make(r, (u, v), bwd)


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    inv = div(1.0, sqrt(var + eps))
    return centered * inv * gain + bias


def linear(x, w, b=None):
    """x[..., din] @ w[din, dout] (+ b)."""
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


# -- gradient checking -----------------------------------------------------

class GradcheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    def __init__(self):
        self.entries = []  # (name, max_rel_err, note)

    def add(self, name, err, note=""):
        self.entries.append((name, err, note))

    @property
    def max_err(self):
        return max((e for _, e, _ in self.entries), default=0.0)

    def passed(self, tol):
        return all(np.isfinite(e) and e < tol for _, e, _ in self.entries)

    def failures(self, tol):
        return [(n, e, note) for n, e, note in self.entries
                if not (np.isfinite(e) and e < tol)]

    def __str__(self):
        lines = [f"  {n:<40s} max_rel_err={e:.3e} {note}" for n, e, note in self.entries]
        return "\n".join(lines)


def _rel_err(ga, gn):
    return np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-6)


def gradcheck(f, params, h=1e-5, tol=1e-5):
    """Compare analytic gradients of the scalar ``f()`` against central
    differences for every element of every Tensor in ``params``.

    ``f`` must be deterministic: it is re-evaluated many times with
    perturbed parameter values.  Returns a GradcheckReport; non-finite
    analytic gradients are reported as failures with the parameter path.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = []
    for i, p in enumerate(params):
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    report = GradcheckReport()
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        if not np.isfinite(analytic[i]).all():
            report.add(name, np.inf, "non-finite analytic gradient")
            continue
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = f().item()
            flat[j] = orig - h
            lo = f().item()
            flat[j] = orig
            nflat[j] = (hi - lo) / (2 * h)
        if not np.isfinite(numeric).all():
            report.add(name, np.inf, "non-finite numeric gradient")
            continue
        err = _rel_err(analytic[i], numeric)
        report.add(name, float(err.max()) if err.size else 0.0)
    return report
