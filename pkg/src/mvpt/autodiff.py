"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

A small tape-based autograd over numpy arrays. Tensors default to float32;
verification runs switch the whole stack to float64 via `set_default_dtype`.
Graphs are built per forward pass and discarded after `backward`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "matmul",
    "concat",
    "broadcast_to",
    "roll",
    "gather_rows",
    "gelu",
    "layer_norm",
    "softmax_temp",
    "log_softmax",
    "cross_entropy",
    "kl_div",
    "kl_saturation_count",
    "reset_kl_saturation_count",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Shape or axis mismatch between operands."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward root)."""


_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype):
    """Set the scalar type for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy-backed array node in the compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE if _backward is None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # ---- basic introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph plumbing ------------------------------------------------------

    def detach(self):
        """A view of the same data with no graph history and no gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # grads are never mutated in place, so aliasing the incoming array is safe
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Populate `grad` on every requires_grad tensor reachable from this scalar."""
        if self.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_np(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _np(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad, name=name)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


# ---- elementwise and structural primitives ----------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents mismatch: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw)


def texp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bw)


def tlog(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tsqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), bw)


def roll(a, shift, axis):
    """Cyclic shift along one or more axes (used by shifted-window attention)."""
    a = _as_tensor(a)
    out_data = np.roll(a.data, shift, axis=axis)
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift

    def bw(g):
        a._accumulate(np.roll(g, neg, axis=axis))

    return _make(out_data, (a,), bw)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tensors, bw)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    out_data = np.broadcast_to(a.data, shape)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(out_data, (a,), bw)


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int)) for p in parts)


def _getitem(a, key):
    a = _as_tensor(a)
    out_data = a.data[key]
    basic = _is_basic_index(key)

    def bw(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[key] = g  # basic indexing never repeats elements
        else:
            np.add.at(buf, key, g)
        a._accumulate(buf)

    return _make(out_data, (a,), bw)


def gather_rows(a, idx):
    """Pick a[i, idx[i]] per row; backward scatters into the picked slots."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, idx), g)
        a._accumulate(buf)

    return _make(out_data, (a,), bw)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    out_data = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        a._accumulate(g * (cdf + x * pdf))

    return _make(out_data, (a,), bw)


# ---- composite neural-net ops ------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    out = div(xc, tsqrt(add(var, eps)))
    return add(mul(out, gamma), beta)


def softmax_temp(t, tau=1.0, axis=-1):
    """Temperature-softened softmax: softmax(t / tau) along `axis`."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = _as_tensor(t)
    z = mul(t, 1.0 / tau)
    # max-shift for stability; gradient is exact since softmax is shift-invariant
    m = z.data.max(axis=axis, keepdims=True)
    e = texp(add(z, -m))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(t, axis=-1):
    t = _as_tensor(t)
    m = t.data.max(axis=axis, keepdims=True)
    z = add(t, -m)
    lse = tlog(tsum(texp(z), axis=axis, keepdims=True))
    return z - lse


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels}")
    ls = log_softmax(logits, axis=-1)
    picked = gather_rows(ls, labels)
    return mul(tsum(picked), -1.0 / labels.shape[0])


_KL_EPS = 1e-8
_kl_saturation_count = 0


def kl_saturation_count():
    return _kl_saturation_count


def reset_kl_saturation_count():
    global _kl_saturation_count
    _kl_saturation_count = 0


def kl_div(p, q):
    """D_KL(p || q) over the last axis, with 0*log(0) := 0.

    Zero entries of q facing positive p are clamped at 1e-8; each such clamp
    bumps the module-level saturation counter so tests can observe it.
    """
    global _kl_saturation_count
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    sums_p = p.data.sum(axis=-1)
    sums_q = q.data.sum(axis=-1)
    if not (np.all(np.abs(sums_p - 1.0) < 1e-5) and np.all(np.abs(sums_q - 1.0) < 1e-5)):
        raise ValueError("kl_div inputs must lie on the probability simplex")
    pc = np.maximum(p.data, _KL_EPS)
    qc = np.maximum(q.data, _KL_EPS)
    saturated = np.any((q.data < _KL_EPS) & (p.data > _KL_EPS))
    if saturated:
        _kl_saturation_count += 1
    logratio = np.log(pc) - np.log(qc)
    out_data = np.sum(np.where(p.data > 0, p.data * logratio, 0.0), axis=-1)

    def bw(g):
        gg = np.expand_dims(g, -1)
        if p.requires_grad:
            p._accumulate(gg * np.where(p.data > 0, logratio + 1.0, 0.0))
        if q.requires_grad:
            gq = np.where(q.data >= _KL_EPS, -p.data / qc, 0.0)
            q._accumulate(gg * gq)

    return _make(out_data, (p, q), bw)


# ---- verification harness ----------------------------------------------------


def finite_diff_check(f, params, h=1e-5, max_coords_per_tensor=None, rng=None):
    """Compare analytic gradients of scalar `f(params)` to central differences.

    `params` is a dict name -> Tensor (requires_grad leaves). Returns a report
    dict with the max relative error and the worst (name, index). When
    `max_coords_per_tensor` is set, a random coordinate subset per tensor is
    probed instead of every entry.
    """
    if get_default_dtype() is not np.float64:
        raise ContractError("finite_diff_check requires float64 mode")
    rng = rng or np.random.default_rng(0)
    for t in params.values():
        t.zero_grad()
    out = f()
    out.backward()
    analytic = {}
    for name, t in params.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.zero_grad()

    worst = (0.0, None, None)
    per_tensor = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = np.arange(n)
        errs = []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            if not np.isfinite(fd):
                raise ArithmeticError(f"non-finite finite difference at {name}[{i}]")
            an = analytic[name].reshape(-1)[i]
            denom = max(abs(fd), abs(an), 1e-4)
            err = abs(fd - an) / denom
            errs.append(err)
            if err > worst[0]:
                worst = (err, name, int(i))
        per_tensor[name] = float(max(errs)) if errs else 0.0
    return {
        "max_rel_err": float(worst[0]),
        "worst_param": worst[1],
        "worst_index": worst[2],
        "per_tensor": per_tensor,
    }
