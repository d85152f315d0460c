"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learnable block of the model is composed from the primitives here.  A
`Tensor` records the operation that produced it; calling ``backward()`` on a
scalar result walks the recorded graph once, in reverse creation order, and
accumulates ``dLoss/dTensor`` into ``.grad`` of every tensor that requires it.

Any primitive that produces NaN or Inf raises `NumericError` immediately.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, ParameterError, StateError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "activation",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "einsum",
    "concat",
    "temporal_conv",
    "softmax_temperature",
    "batch_norm",
    "mse",
    "grad_check",
]

_counter = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._id = next(_counter)
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NumericError(f"{op} produced non-finite values")
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data + b.data
        return Tensor._make(
            out,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data - b.data
        return Tensor._make(
            out,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data * b.data
        return Tensor._make(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(out, (a, b), back, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self
        p = float(exponent)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data**p
        return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        a = self

        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in parts)

        def back(g):
            full = np.zeros_like(a.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(a.data[index], (a,), back, "getitem")

    # -- reductions and reshaping --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.data.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")

    @property
    def T(self):
        return self.transpose()

    # -- reverse pass ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor t upstream.

        ``self`` must be a scalar.  A graph can be walked only once.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise StateError("backward() already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            return

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            if node._consumed:
                raise StateError("graph contains tensors from an already-differentiated pass")
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending = {self._id: np.ones_like(self.data)}
        # parents are always created before children, so descending ids is a topological order
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = pending.pop(nid, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg

        for node in nodes.values():
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return Tensor._make(out, (a, b), back, "matmul")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._make(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)

    return Tensor._make(out, (x,), back, "sqrt")


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` for a constant floor; gradient passes where x > floor."""
    x = as_tensor(x)
    mask = x.data > floor
    return Tensor._make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "maximum")


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit-output subscripts without repeated indices."""
    ops = [as_tensor(o) for o in operands]
    if "->" not in subscripts:
        raise ParameterError("einsum needs explicit output subscripts")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise DimensionError("einsum operand count does not match subscripts")
    for s, o in zip(in_subs, ops):
        if len(set(s)) != len(s):
            raise ParameterError("einsum repeated indices within an operand are not supported")
        if len(s) != o.ndim:
            raise DimensionError(f"einsum subscript {s!r} does not match operand shape {o.shape}")
    try:
        data = np.einsum(subscripts, *[o.data for o in ops], optimize=True)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def back(g):
        grads = []
        for i, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[j], ops[j].data) for j in range(len(ops)) if j != i]
            seen = set(out_sub).union(*[set(sj) for sj, _ in others]) if others else set(out_sub)
            kept = "".join(c for c in s if c in seen)
            spec = ",".join([out_sub] + [sj for sj, _ in others]) + "->" + kept
            gi = np.einsum(spec, g, *[d for _, d in others], optimize=True)
            if kept != s:
                # indices summed away inside this operand alone: broadcast back
                for axis, c in enumerate(s):
                    if c not in seen:
                        gi = np.expand_dims(gi, axis)
                gi = np.broadcast_to(gi, o.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return Tensor._make(data, tuple(ops), back, "einsum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back, "concat")


def temporal_conv(x, w, dilation: int = 1, bias=None) -> Tensor:
    """Causal dilated convolution along the last (time) axis.

    x: (B, C, N, T), w: (O, C, k), bias: (O,) or None -> (B, O, N, T - (k-1)*dilation).
    Tap j multiplies the input j*dilation steps in the past, so output
    position i (aligned with input step i + (k-1)*dilation) is
    ``sum_j w[..., j] * x[..., i + (k-1-j)*dilation]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"temporal_conv shape mismatch: x{x.shape}, w{w.shape}")
    k = w.shape[2]
    span = (k - 1) * dilation
    t_out = x.shape[3] - span
    if t_out < 1:
        raise DimensionError(f"sequence length {x.shape[3]} shorter than kernel span {span + 1}")
    # im2col: cols[b, n, i, c, j] = x[b, c, n, i + span - j*dilation]
    xs = x.data.transpose(0, 2, 3, 1)
    starts = [span - j * dilation for j in range(k)]
    cols = np.stack([xs[:, :, s0 : s0 + t_out] for s0 in starts], axis=-1)
    out = np.tensordot(cols, w.data, axes=([3, 4], [1, 2])).transpose(0, 3, 1, 2)
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, w, bias)

    def back(g):
        gt = g.transpose(0, 2, 3, 1)
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2]))
        if x.requires_grad:
            gcols = np.tensordot(gt, w.data, axes=([3], [0]))
            gxs = np.zeros(xs.shape)
            for j, s0 in enumerate(starts):
                gxs[:, :, s0 : s0 + t_out] += gcols[..., j]
            gx = gxs.transpose(0, 3, 1, 2)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor._make(out, parents, back, "temporal_conv")


def softmax_temperature(scores, tau: float) -> Tensor:
    """softmax(scores / tau) over the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    s = as_tensor(scores)
    z = s * (1.0 / tau)
    z = z - z.data.max(axis=-1, keepdims=True)
    e = exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batch_norm(
    x,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    gamma,
    beta,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over axis 0 of a (rows, features) input.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like torch).
    """
    x = as_tensor(x)
    nfeat = x.shape[-1]
    if running_mean.shape != (nfeat,) or running_var.shape != (nfeat,):
        raise DimensionError("running statistics do not match the feature dimension")
    if mode == "train":
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        n = x.shape[0]
        unbiased = var.data[0] * (n / (n - 1)) if n > 1 else var.data[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data[0]
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        xhat = centered * (var + eps) ** -0.5
    elif mode == "eval":
        xhat = (x - running_mean) * (1.0 / np.sqrt(running_var + eps))
    else:
        raise ParameterError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    return xhat * gamma + beta


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def grad_check(f: Callable, x, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central finite differences.

    ``x`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.zero_grad()
    out = f(*xs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*xs).item()
            flat[i] = orig - eps
            fm = f(*xs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
