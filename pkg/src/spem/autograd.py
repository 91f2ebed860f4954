"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function`. Calling
``Function.apply`` runs the forward pass on the raw numpy buffers and, if any
input requires a gradient, links the output tensor back to the function so
that :meth:`Tensor.backward` can replay the recorded graph in reverse
topological order.

Tensors default to float64. float32 buffers are accepted and preserved so
training can run faster; all gradient checks use float64.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """An n-dimensional array that can participate in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # producing function; None for leaves
        self._ctx: Optional[Function] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{extra})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other):
        return Div.apply(self._lift(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, self._lift(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    # -- differentiation -----------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Gradients accumulate; callers zero them between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(self.data)
        if self._ctx is None:
            self.grad = seed if self.grad is None else self.grad + seed
            return
        tape = Tape.record(self)
        pending = {id(self): seed}
        for fn, out in reversed(tape.entries):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, ig in zip(fn.inputs, fn.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._ctx is None:
                    inp.grad = np.array(ig, dtype=inp.dtype) if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    pending[key] = pending[key] + ig if key in pending else ig


class Tape:
    """Operations reachable from a root, producers before consumers."""

    def __init__(self, entries):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        entries = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                entries.append((t._ctx, t))
                continue
            if id(t) in seen or t._ctx is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._ctx.inputs:
                if inp.requires_grad and inp._ctx is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(entries)


class Function:
    """Base class for a differentiable operation."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class _Binary(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return self.compute(a, b)


class Add(_Binary):
    def compute(self, a, b):
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.a.shape), unbroadcast(g, self.b.shape)


class Sub(_Binary):
    def compute(self, a, b):
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.a.shape), unbroadcast(-g, self.b.shape)


class Mul(_Binary):
    def compute(self, a, b):
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(_Binary):
    def compute(self, a, b):
        return a / b

    def backward(self, g):
        ga = g / self.b
        return unbroadcast(ga, self.a.shape), unbroadcast(-ga * self.a / self.b, self.b.shape)


_ELEMENTWISE = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}


def elementwise(kind: str, a: Tensor, b: ArrayLike) -> Tensor:
    """Apply a broadcasting binary op by name (``add``, ``sub``, ``mul``, ``div``)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn.apply(a, a._lift(b))


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        return (_expand_reduced(g, self.shape, self.axis, self.keepdims),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1) if a.size else 0
        return out

    def backward(self, g):
        return (_expand_reduced(g / self.count, self.shape, self.axis, self.keepdims),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None

    def backward(self, g):
        return (g.reshape(self.shape),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Function):
    def forward(self, a):
        self.s = _sigmoid(a)
        return self.s

    def backward(self, g):
        return (g * self.s * (1.0 - self.s),)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.maximum(a, 0)

    def backward(self, g):
        return (g * self.mask,)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


class Conv2d(Function):
    """Direct cross-correlation over NCHW input, lowered to one matrix product.

    Columns are laid out channel-major, ``(C*kh*kw, N*Ho*Wo)``, so forward and
    both backward products are single GEMMs.
    """

    def forward(self, x, w, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"input has {x.shape[1]} channels but weight expects {w.shape[1]} ({x.shape} vs {w.shape})")
        if stride < 1 or pad < 0:
            raise ValueError(f"invalid stride={stride} or pad={pad}")
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape}")
        self.xshape, self.w, self.stride, self.pad = x.shape, w, stride, pad
        self.out_hw = (ho, wo)
        xt = x.transpose(1, 0, 2, 3)
        if kh == kw == 1 and pad == 0:
            xs = xt[:, :, ::stride, ::stride] if stride > 1 else xt
            cols = np.ascontiguousarray(xs).reshape(c, n * ho * wo)
        else:
            xp = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xt
            cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols = cols.reshape(c * kh * kw, n * ho * wo)
        self.cols = cols
        out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(self, g):
        n, c, h, wd = self.xshape
        o, _, kh, kw = self.w.shape
        ho, wo = self.out_hw
        s, p = self.stride, self.pad
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        dw = (gt @ self.cols.T).reshape(self.w.shape)
        dcols = self.w.reshape(o, -1).T @ gt
        if kh == kw == 1 and p == 0:
            dcols = dcols.reshape(c, n, ho, wo)
            if s == 1:
                dxt = dcols
            else:
                dxt = np.zeros((c, n, h, wd), dtype=g.dtype)
                dxt[:, :, ::s, ::s] = dcols
            return np.ascontiguousarray(dxt.transpose(1, 0, 2, 3)), dw
        dcols = dcols.reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        dxt = dxp[:, :, p:p + h, p:p + wd]
        return np.ascontiguousarray(dxt.transpose(1, 0, 2, 3)), dw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, pad=pad)


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class BatchNorm(Function):
    """Per-channel normalization over every axis except axis 1.

    Written as ``y = x * scale + shift`` per channel so forward and backward
    each touch the full tensor only a handful of times.
    """

    def forward(self, x, gamma, beta, mean=None, var=None, eps=BN_EPS):
        if x.ndim < 2:
            raise ShapeError(f"batch_norm needs at least 2-d input, got {x.shape}")
        n, c = x.shape[:2]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
        self.bshape = (1, c) + (1,) * (x.ndim - 2)
        self.m = x.size // c
        self.training = mean is None
        x3 = x.reshape(n, c, -1)
        if self.training:
            mean = np.einsum("ncl->c", x3) / self.m
            xc = x - mean.reshape(self.bshape)
            xc3 = xc.reshape(n, c, -1)
            var = np.einsum("ncl,ncl->c", xc3, xc3) / self.m
        else:
            xc = x - mean.reshape(self.bshape)
        self.batch_mean, self.batch_var = mean, var
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x, self.gamma = x, gamma
        xc *= (gamma * self.inv_std).reshape(self.bshape)
        xc += beta.reshape(self.bshape)
        return xc

    def backward(self, g):
        n, c = g.shape[:2]
        g3 = g.reshape(n, c, -1)
        dbeta = np.einsum("ncl->c", g3)
        gx = np.einsum("ncl,ncl->c", g3, self.x.reshape(n, c, -1))
        # sum(g * xhat) without materializing xhat
        dgamma = (gx - self.batch_mean * dbeta) * self.inv_std
        a = self.gamma * self.inv_std
        if not self.training:
            return g * a.reshape(self.bshape), dgamma, dbeta
        b = -a * self.inv_std * dgamma / self.m
        cst = -a * dbeta / self.m - b * self.batch_mean
        dx = g * a.reshape(self.bshape)
        tmp = self.x * b.reshape(self.bshape)
        dx += tmp
        dx += cst.reshape(self.bshape)
        return dx, dgamma, dbeta


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool) -> Tensor:
    """Batch normalization; train mode updates the running statistics in place."""
    if x.shape[0] == 0:
        raise ValueError("batch_norm called on an empty batch")
    if not training:
        return BatchNorm.apply(x, gamma, beta, mean=running_mean, var=running_var)
    out = BatchNorm.apply(x, gamma, beta)
    fn = out._ctx if out._ctx is not None else None
    if fn is not None:
        mean, var = fn.batch_mean, fn.batch_var
    else:
        axes = (0,) + tuple(range(2, x.ndim))
        mean, var = x.data.mean(axis=axes), x.data.var(axis=axes)
    m = x.size // x.shape[1]
    unbiased = var * (m / (m - 1)) if m > 1 else var
    running_mean *= BN_MOMENTUM
    running_mean += (1 - BN_MOMENTUM) * mean
    running_var *= BN_MOMENTUM
    running_var += (1 - BN_MOMENTUM) * unbiased
    return out


class GlobalExtremePool(Function):
    """Max or min over the last two axes; gradient goes to the first extremal element."""

    def forward(self, x, mode="max"):
        if x.ndim < 2:
            raise ShapeError(f"global pooling needs a (..., H, W) input, got {x.shape}")
        h, w = x.shape[-2:]
        if h == 0 or w == 0:
            raise ValueError(f"empty spatial plane in shape {x.shape}")
        flat = x.reshape(x.shape[:-2] + (h * w,))
        self.idx = (np.argmax if mode == "max" else np.argmin)(flat, axis=-1)[..., None]
        self.flat_shape, self.xshape = flat.shape, x.shape
        return np.take_along_axis(flat, self.idx, axis=-1)[..., None]

    def backward(self, g):
        dflat = np.zeros(self.flat_shape, dtype=g.dtype)
        np.put_along_axis(dflat, self.idx, g[..., 0], axis=-1)
        return (dflat.reshape(self.xshape),)


class CrossEntropy(Function):
    """Mean softmax cross-entropy of ``logits`` (N x K) against integer labels."""

    def forward(self, logits, labels):
        if logits.ndim != 2:
            raise ShapeError(f"logits must be N x K, got {logits.shape}")
        n, k = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match {n} logits rows")
        if n and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(logp)
        self.labels = labels
        return np.asarray(-logp[np.arange(n), labels].mean())

    def backward(self, g):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (g / n),)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return CrossEntropy.apply(logits, labels=labels)
