"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Only the operator set needed by the open-set model is provided: dense and
convolutional layers, pointwise nonlinearities, reductions, row-wise L2
normalization and the concatenations used to attach descriptors and the
threshold logit.  Every op records a closure that maps the upstream gradient
to the gradients of its inputs; :func:`backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class DegenerateInputError(ValueError):
    """Raised by strict normalization when a row has zero norm."""


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting (covers scalar multiplication)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean", a.shape)
    return mul(sum(a, axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=0)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError("slice_rows", a.shape, (start, stop))

    def backward(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop], (a,), backward, "slice_rows")


def pick(a, index) -> Tensor:
    """Select ``a[i, index[i]]`` for every row ``i`` of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, index.shape)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _make(a.data[rows, index], (a,), backward, "pick")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + peak).squeeze(axis)
    weights = shifted / total

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _make(out, (a,), backward, "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    lse = logsumexp(a, axis)
    return add(a, neg(reshape(lse, np.expand_dims(lse.data, axis).shape)))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_with_extra_logit(logits, extra) -> Tensor:
    """Softmax over ``[logits, extra]`` where ``extra`` is one logit shared by all rows."""
    logits, extra = as_tensor(logits), as_tensor(extra)
    if logits.data.ndim != 2 or extra.size != 1:
        raise ShapeError("softmax_with_extra_logit", logits.shape, extra.shape)
    column = mul(reshape(extra, (1, 1)), np.ones((logits.shape[0], 1)))
    return softmax(concat([logits, column], axis=1), axis=1)


def l2_normalize(a, axis: int = -1, eps: float = NORM_EPS, strict: bool = False) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    The norm is floored at ``eps`` so that zero rows map to zero instead of
    NaN; ``strict=True`` raises instead.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if strict and np.any(norm < eps):
        bad = np.argwhere(norm.squeeze(axis) < eps).ravel().tolist()
        raise DegenerateInputError(f"l2_normalize: zero-norm slice(s) at {bad}")
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    out = a.data / denom

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / eps, (g - out * radial) / denom),)

    return _make(out, (a,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution and pooling, NHWC layout


def conv2d(x, weight, bias=None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution. ``x``: N×H×W×Cin, ``weight``: kh×kw×Cin×Cout."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw, cin, cout = weight.shape
    n, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    # windows: N×Ho×Wo×Cin×kh×kw
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = cols @ wmat
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d", x.shape, weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo, :] += gcols[..., i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x) -> Tensor:
    """2×2 max-pool with stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError("maxpool2d", x.shape)
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    blocks = x.data[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, ho, wo, c, 4))
        np.put_along_axis(gb, winner[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        gx = np.zeros_like(x.data)
        gx[:, :2 * ho, :2 * wo, :] = gb
        return (gx,)

    return _make(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves whose ``.grad`` is None start from zero; existing gradients are
    added to, so call :func:`zero_grad` between steps.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradcheckReport:
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    rel_error: list[np.ndarray]
    tolerance: float
    failures: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((float(e.max()) for e in self.rel_error if e.size), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
              tolerance: float = 1e-4, floor: float = 1e-6) -> GradcheckReport:
    """Compare :func:`backward` gradients of ``f(*inputs)`` with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``f`` must rebuild its graph from ``inputs`` on every call.
    """
    if step <= 0:
        raise ValueError("gradcheck: step must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("gradcheck: f is not finite at the given point")
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    numeric, errors, failures = [], [], []
    for k, t in enumerate(inputs):
        approx = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            hi = float(f(*inputs).data)
            flat[i] = original - step
            lo = float(f(*inputs).data)
            flat[i] = original
            coord = tuple(int(c) for c in np.unravel_index(i, t.shape))
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"gradcheck: NaN/Inf at input {k} coordinate {coord}")
            approx.reshape(-1)[i] = (hi - lo) / (2 * step)
        a = analytic[k]
        if not np.isfinite(a).all():
            bad = tuple(int(c) for c in np.argwhere(~np.isfinite(a))[0])
            raise FloatingPointError(f"gradcheck: NaN/Inf gradient at input {k} coordinate {bad}")
        err = np.abs(a - approx) / np.maximum(np.maximum(np.abs(a), np.abs(approx)), floor)
        failures.extend((k, tuple(int(c) for c in idx)) for idx in np.argwhere(err > tolerance))
        numeric.append(approx)
        errors.append(err)
    return GradcheckReport(analytic, numeric, errors, tolerance, failures)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``param`` and ``state`` in place."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError("adam_step", param.shape, grad.shape, state.m.shape)
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


class Adam:
    """Adam over parameter groups, each group with its own lr multiplier."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.groups = [(list(params), scale) for params, scale in groups]
        self.states = {
            id(p): AdamState.zeros_like(p.data, beta1=betas[0], beta2=betas[1], eps=eps)
            for params, _ in self.groups for p in params
        }

    def params(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        zero_grad(self.params())

    def step(self) -> None:
        for params, scale in self.groups:
            for p in params:
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                adam_step(p.data, grad, self.states[id(p)], self.lr * scale)
