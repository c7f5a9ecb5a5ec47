"""Dense tensors with reverse-mode differentiation, AdamW, LR schedule, grad checks.

The tape is rebuilt on every forward pass. A ``Tensor`` produced by an op keeps
references to its parents and a closure mapping the output gradient to parent
gradients; ``forward_backward`` walks that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NumericError(FloatingPointError):
    """A non-finite value appeared; ``op`` names the producing operation."""

    def __init__(self, op, where="forward"):
        super().__init__(f"non-finite value produced by '{op}' ({where} pass)")
        self.op = op


class NondeterminismError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape (frozen inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_non_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    """Promote python scalars / arrays so both operands share a float dtype."""
    if not isinstance(a, Tensor):
        ref = b.data.dtype if isinstance(b, Tensor) else None
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a):
    """tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), back, "gelu")


def abs_(a):
    # subgradient at 0 fixed to +1
    sign = np.where(a.data >= 0, 1.0, -1.0).astype(a.data.dtype)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), back, "mean")


def logsumexp(a, axis=-1, keepdims=False):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _make(out, (a,), back, "logsumexp")


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``. ``mask`` (bool, broadcastable) marks entries to exclude."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


# --------------------------------------------------------------------- shapes

def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def take_rows(table, ids):
    """Row lookup ``table[ids]`` (embedding tables)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), back, "take_rows")


# ------------------------------------------------------------------- products

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects operands with ndim >= 2")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape [in, out]."""
    din, dout = weight.shape
    xd = x.data
    out = xd @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = xd.reshape(-1, din).T @ g.reshape(-1, dout) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, dout).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "linear")


def layernorm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data + beta.data
    n = xd.shape[-1]

    def back(g):
        gh = g * gamma.data if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (gx,)
        gg = (g * xhat).reshape(-1, n).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _make(out, parents, back, "layernorm")


def conv3d_patches(x, weight, bias, kernel, stride):
    """3-D convolution over [B, C, T, H, W] returning tokens [B, L, out].

    ``weight`` has shape [C*kt*kh*kw, out]; L enumerates output positions in
    (t, h, w) row-major order. Output grid is floor((dim - k) / s) + 1 per axis.
    """
    B, C, T, H, W = x.shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    gt, gh, gw = (T - kt) // st + 1, (H - kh) // sh + 1, (W - kw) // sw + 1
    if min(gt, gh, gw) < 1:
        raise ContractError(f"input {(T, H, W)} smaller than cube {kernel}")
    idx = _patch_index(C, T, H, W, kernel, stride)
    flat = x.data.reshape(B, -1)
    cols = flat[:, idx]                      # [B, L, C*kt*kh*kw]
    out = cols @ weight.data + bias.data
    K, dout = weight.shape

    def back(g):
        gx = None
        if x.requires_grad:
            gcols = g @ weight.data.T
            full = np.zeros((B, C * T * H * W), dtype=x.data.dtype)
            for b in range(B):
                full[b] = np.bincount(idx.reshape(-1), weights=gcols[b].reshape(-1),
                                      minlength=C * T * H * W)
            gx = full.reshape(x.shape)
        gw = cols.reshape(-1, K).T @ g.reshape(-1, dout) if weight.requires_grad else None
        gb = g.reshape(-1, dout).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), back, "conv3d"), (gt, gh, gw)


_patch_cache = {}


def _patch_index(C, T, H, W, kernel, stride):
    key = (C, T, H, W, tuple(kernel), tuple(stride))
    if key not in _patch_cache:
        kt, kh, kw = kernel
        st, sh, sw = stride
        ts = np.arange(0, T - kt + 1, st)
        hs = np.arange(0, H - kh + 1, sh)
        ws = np.arange(0, W - kw + 1, sw)
        c, dt, dh, dw = np.meshgrid(np.arange(C), np.arange(kt), np.arange(kh), np.arange(kw), indexing="ij")
        offs = ((c * T + dt) * H + dh) * W + dw                        # [C,kt,kh,kw]
        t0, h0, w0 = np.meshgrid(ts, hs, ws, indexing="ij")
        base = (t0 * H + h0) * W + w0                                  # [gt,gh,gw]
        _patch_cache[key] = base.reshape(-1, 1) + offs.reshape(1, -1)
    return _patch_cache[key]


# ------------------------------------------------------------------- params

class ParamSet:
    """Ordered name -> Tensor map with a trainable flag per entry."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, value, trainable=True):
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._tensors[name] = Tensor(np.asarray(value), requires_grad=trainable)
        return self._tensors[name]

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self):
        return {k: t.data for k, t in self._tensors.items()}

    def is_trainable(self, name):
        return self._tensors[name].requires_grad

    def set_trainable(self, name, flag):
        self._tensors[name].requires_grad = bool(flag)

    def trainable_names(self):
        return [k for k, t in self._tensors.items() if t.requires_grad]

    def n_trainable(self):
        return int(sum(t.data.size for t in self._tensors.values() if t.requires_grad))

    def n_total(self):
        return int(sum(t.data.size for t in self._tensors.values()))

    def set_value(self, name, array):
        t = self._tensors[name]
        array = np.asarray(array, dtype=t.data.dtype)
        if array.shape != t.data.shape:
            raise ContractError(f"shape mismatch for {name}: {array.shape} vs {t.data.shape}")
        t.data = array

    def copy(self, dtype=None):
        out = ParamSet()
        for k, t in self._tensors.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out.add(k, data, trainable=t.requires_grad)
        return out

    def subset(self, prefixes):
        """Share tensors whose names start with any of ``prefixes``."""
        out = ParamSet()
        for k, t in self._tensors.items():
            if k.startswith(tuple(prefixes)):
                out._tensors[k] = t
        return out

    def merge(self, other):
        for k, t in other.items():
            if k in self._tensors:
                raise ContractError(f"duplicate parameter name {k!r}")
            self._tensors[k] = t
        return self


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Return {id(tensor): gradient} for every tensor on the tape."""
    if root.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    if not root.requires_grad:
        return grads
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(node.op, where="backward")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def forward_backward(loss, params):
    """Gradients of scalar ``loss`` for every parameter; unreachable ones get zeros."""
    grads = backward(loss)
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    return out


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr=None):
    """One AdamW update on every trainable parameter (decay decoupled from the gradient)."""
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params.trainable_names():
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        theta = p.data * (1.0 - lr * state.weight_decay)
        theta = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = theta.astype(p.data.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float = 4.8e-5
    decay_epoch: int = 300
    factor: float = 0.1


def lr_at(epoch, schedule=LRSchedule()):
    """Step decay: ``base_lr`` before ``decay_epoch``, ``base_lr * factor`` from it on."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    if epoch >= schedule.decay_epoch:
        return schedule.base_lr * schedule.factor
    return schedule.base_lr


# --------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_err: dict
    tol: float
    worst: tuple = None

    @property
    def passed(self):
        return all(e <= self.tol for e in self.max_rel_err.values())


def grad_check(fn, params, h=1e-5, tol=1e-4, max_per_param=None, rng=None):
    """Compare analytic gradients with central differences.

    ``fn(params)`` must return a scalar Tensor. Relative error per element is
    |a - fd| / max(|a|, |fd|, 1e-8). ``max_per_param`` limits probed elements
    (sampled with ``rng``) for large parameters.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    loss = fn(params)
    again = fn(params)
    if loss.data.tobytes() != again.data.tobytes():
        raise NondeterminismError("fn returned different values for identical parameters")
    analytic = forward_backward(loss, params)
    rng = np.random.default_rng(0) if rng is None else rng
    errs, worst = {}, (None, None, -1.0)
    with no_grad():
        for name in params.trainable_names():
            t = params[name]
            base = t.data
            flat_idx = np.arange(base.size)
            if max_per_param is not None and base.size > max_per_param:
                flat_idx = np.sort(rng.choice(base.size, size=max_per_param, replace=False))
            a_flat = analytic[name].reshape(-1)
            max_err = 0.0
            for i in flat_idx:
                pert = base.copy().reshape(-1)
                pert[i] = base.reshape(-1)[i] + h
                t.data = pert.reshape(base.shape)
                fp = fn(params).item()
                pert[i] = base.reshape(-1)[i] - h
                t.data = pert.reshape(base.shape)
                fm = fn(params).item()
                t.data = base
                fd = (fp - fm) / (2.0 * h)
                a = float(a_flat[i])
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                if err > max_err:
                    max_err = err
                if err > worst[2]:
                    worst = (name, int(i), err)
            errs[name] = max_err
    return GradCheckReport(errs, tol, worst)
