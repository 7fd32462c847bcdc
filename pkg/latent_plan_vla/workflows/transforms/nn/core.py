"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Ops run eagerly. Inside an active `Tape` every op with a gradient-requiring
input is recorded in execution order; `backward(loss)` walks that record in
reverse. Outside a tape ops are plain numpy calls, which is the inference path.
"""
from __future__ import annotations

import math
import threading
from typing import List, Optional, Sequence

import numpy as np

from latent_plan_vla.schemas.general.errors import DomainError

DTYPE = np.float64

_local = threading.local()


def _tapes() -> List['Tape']:
    # per thread, so inference workers never record onto a training tape
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional['Tape']:
    tapes = _tapes()
    return tapes[-1] if tapes else None


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'is_leaf', 'name', '__weakref__')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ''
        return f"<Tensor{label} shape={self.shape}>"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, x): return add(self, x)
    def __radd__(self, x): return add(as_tensor(x), self)
    def __sub__(self, x): return sub(self, x)
    def __rsub__(self, x): return sub(as_tensor(x), self)
    def __mul__(self, x): return mul(self, x)
    def __rmul__(self, x): return mul(as_tensor(x), self)
    def __truediv__(self, x):
        if isinstance(x, Tensor):
            raise DomainError("division is only supported by constants")
        return mul(self, 1.0 / float(x))
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, x): return matmul(self, x)
    def __getitem__(self, index): return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class _Node:
    __slots__ = ('fn', 'inputs', 'output')

    def __init__(self, fn, inputs, output):
        self.fn = fn
        self.inputs = inputs
        self.output = output


class Tape:
    """
    Ordered record of primitive ops.
    - use as a context manager: ops inside are recorded
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def record(self, fn, inputs, output):
        self.nodes.append(_Node(fn, inputs, output))

    def backward(self, loss: Tensor, store=None):
        backward(loss, store=store, tape=self)


class Function:
    def forward(self, *args):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls(**kwargs) if kwargs else cls()
        inputs = tuple(as_tensor(t) for t in inputs)
        try:
            out = fn.forward(*[t.data for t in inputs])
        except ValueError as e:
            shapes = ', '.join(str(t.shape) for t in inputs)
            raise DomainError(f"{cls.__name__} got incompatible shapes ({shapes}): {e}") from e
        if not np.all(np.isfinite(out)):
            raise DomainError(f"{cls.__name__} produced non-finite values")
        result = Tensor(out)
        tape = current_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            result.requires_grad = True
            result.is_leaf = False
            tape.record(fn, inputs, result)
        return result


# -----------------------------------------------------------
# Elementwise
# -----------------------------------------------------------

class Add(Function):
    def forward(self, x, y):
        self.xs, self.ys = x.shape, y.shape
        return x + y

    def backward(self, g):
        return _unbroadcast(g, self.xs), _unbroadcast(g, self.ys)


class Sub(Function):
    def forward(self, x, y):
        self.xs, self.ys = x.shape, y.shape
        return x - y

    def backward(self, g):
        return _unbroadcast(g, self.xs), -_unbroadcast(g, self.ys)


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, g):
        return _unbroadcast(g * self.y, self.x.shape), _unbroadcast(g * self.x, self.y.shape)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, x):
        if np.any(x <= 0):
            raise DomainError("log of a non-positive value")
        self.x = x
        return np.log(x)

    def backward(self, g):
        return (g / self.x,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out ** 2),)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """tanh approximation"""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, g):
        x, t = self.x, self.t
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


# -----------------------------------------------------------
# Linear algebra and normalisation
# -----------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Softmax(Function):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x):
        z = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x):
        z = x - x.max(axis=self.axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=self.axis, keepdims=True))
        out = z - lse
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.soft * g.sum(axis=self.axis, keepdims=True),)


class LayerNorm(Function):
    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, x, gamma, beta):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - mu) * self.inv
        self.gamma = gamma
        self.gs, self.bs = gamma.shape, beta.shape
        return self.xhat * gamma + beta

    def backward(self, g):
        n = self.xhat.shape[-1]
        dxhat = g * self.gamma
        dx = (self.inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * self.xhat, self.gs), _unbroadcast(g, self.bs)


# -----------------------------------------------------------
# Indexing and shape
# -----------------------------------------------------------

class Embed(Function):
    def __init__(self, ids=None):
        self.ids = np.asarray(ids, dtype=np.int64)

    def forward(self, w):
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= w.shape[0]):
            raise ValueError(f"ids outside [0, {w.shape[0]})")
        self.ws = w.shape
        return w[self.ids]

    def backward(self, g):
        gw = np.zeros(self.ws, dtype=DTYPE)
        np.add.at(gw, self.ids, g)
        return (gw,)


class Pick(Function):
    """x[..., idx[...]]: one entry of the last axis per leading position"""

    def __init__(self, idx=None):
        self.idx = np.asarray(idx, dtype=np.int64)

    def forward(self, x):
        self.xs = x.shape
        return np.take_along_axis(x, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        gx = np.zeros(self.xs, dtype=DTYPE)
        np.put_along_axis(gx, self.idx[..., None], g[..., None], axis=-1)
        return (gx,)


class Concat(Function):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, *xs):
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class Slice(Function):
    def __init__(self, index=None):
        self.index = index

    def forward(self, x):
        self.xs = x.shape
        return np.array(x[self.index], dtype=DTYPE)

    def backward(self, g):
        gx = np.zeros(self.xs, dtype=DTYPE)
        np.add.at(gx, self.index, g)
        return (gx,)


class Reshape(Function):
    def __init__(self, shape=None):
        self.shape = tuple(shape)

    def forward(self, x):
        self.xs = x.shape
        return x.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.xs),)


class Transpose(Function):
    def __init__(self, axes=None):
        self.axes = tuple(axes)

    def forward(self, x):
        return np.transpose(x, self.axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class Sum(Function):
    def __init__(self, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, x):
        self.xs = x.shape
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.xs).copy(),)


class MSE(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ValueError(f"mse shapes differ: {pred.shape} vs {target.shape}")
        self.diff = pred - target
        return np.asarray(np.mean(self.diff ** 2))

    def backward(self, g):
        d = 2.0 * self.diff / self.diff.size * g
        return d, -d


# -----------------------------------------------------------
# Functional surface
# -----------------------------------------------------------

def add(x, y) -> Tensor: return Add.apply(x, y)
def sub(x, y) -> Tensor: return Sub.apply(x, y)
def mul(x, y) -> Tensor: return Mul.apply(x, y)
def exp(x) -> Tensor: return Exp.apply(x)
def log(x) -> Tensor: return Log.apply(x)
def tanh(x) -> Tensor: return Tanh.apply(x)
def gelu(x) -> Tensor: return Gelu.apply(x)
def matmul(a, b) -> Tensor: return MatMul.apply(a, b)
def softmax(x, axis: int = -1) -> Tensor: return Softmax.apply(x, axis=axis)
def log_softmax(x, axis: int = -1) -> Tensor: return LogSoftmax.apply(x, axis=axis)
def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor: return LayerNorm.apply(x, gamma, beta, eps=eps)
def embed(w, ids) -> Tensor: return Embed.apply(w, ids=ids)
def pick(x, idx) -> Tensor: return Pick.apply(x, idx=idx)
def concat(xs: Sequence, axis: int = -1) -> Tensor: return Concat.apply(*xs, axis=axis)
def slice_(x, index) -> Tensor: return Slice.apply(x, index=index)
def reshape(x, shape) -> Tensor: return Reshape.apply(x, shape=shape)
def transpose(x, axes) -> Tensor: return Transpose.apply(x, axes=axes)
def sum_(x, axis=None, keepdims: bool = False) -> Tensor: return Sum.apply(x, axis=axis, keepdims=keepdims)
def mse(pred, target) -> Tensor: return MSE.apply(pred, target)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -----------------------------------------------------------
# Backward
# -----------------------------------------------------------

def backward(loss: Tensor, store=None, tape: Optional[Tape] = None):
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    Parameters
    ----------
    loss : Tensor
        Scalar produced by ops recorded on `tape` (or the active tape).
    store : ParamStore, optional
        Parameters of `store` the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or current_tape()
    if tape is None or not loss.requires_grad:
        raise DomainError("loss was not produced on a tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.fn.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    if store is not None:
        store.fill_missing_grads()
