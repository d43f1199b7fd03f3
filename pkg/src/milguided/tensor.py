"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient (and gradient recording is enabled) the result remembers
its parents and a closure mapping the output gradient onto parent gradients.
:func:`backward` walks that graph in reverse topological order.

Convolution, pooling and dense layers accept either a single sample
(``c x h x w`` / ``n``) or a batch with one extra leading axis.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError, ValidationError

BCE_EPS = 1e-7

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional real array that can take part in a compute graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in self.data.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- bookkeeping ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    gradient (or ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return make_node(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), _bw, "sum")


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner axis mismatch, left axis -1 has {a.shape[-1]}, right axis 0 has {b.shape[0]}")
    if b.ndim != 2:
        raise DimensionError(f"matmul: right operand must be 2-d, got shape {b.shape}")
    return make_node(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g),
        "matmul")


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def activation(x, kind: str) -> Tensor:
    """Elementwise ``relu`` or ``sigmoid``."""
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")
    if kind == "sigmoid":
        # split by sign so exp never overflows
        z = x.data
        ez = np.exp(-np.abs(z))
        out = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
        return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")
    if kind == "identity":
        return x
    raise ValidationError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def conv2d(input, kernels, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``c_in x h x w`` (or ``n x c_in x h x w``) input.

    Output spatial size is ``(h + 2*padding - kh) // stride + 1``.
    """
    x, w, b = as_tensor(input), as_tensor(kernels), as_tensor(bias)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValidationError(f"padding must be >= 0, got {padding}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be c x h x w or n x c x h x w, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be c_out x c_in x kh x kw, got shape {w.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c_in, h, wd = xd.shape
    c_out, kc, kh, kw = w.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c_in}, kernels expect {kc}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis 0 has {b.shape}, expected ({c_out},)")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp:
        raise DimensionError(f"conv2d: kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise DimensionError(f"conv2d: kernel width {kw} exceeds padded input width {wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    # columns are laid out (kh, kw, c_in) x (n, ho, wo) so that both the
    # forward product and the gradient scatter stay on contiguous blocks
    xc = np.zeros((c_in, n, hp, wp))
    xc[:, :, padding:padding + h, padding:padding + wd] = xd.transpose(1, 0, 2, 3)
    row_end, col_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((kh, kw, c_in, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xc[:, :, i:i + row_end:stride, j:j + col_end:stride]
    cols = cols.reshape(kh * kw * c_in, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (wmat @ cols + b.data[:, None]).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if single:
        out = out[0]

    def _bw(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(kh, kw, c_in, n, ho, wo)
            gpad = np.zeros((c_in, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + row_end:stride, j:j + col_end:stride] += dcols[i, j]
            gx = gpad[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3)
            if single:
                gx = gx[0]
        return gx, gw, gb

    return make_node(out, (x, w, b), _bw, "conv2d")


def global_avg_pool(input) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    x = as_tensor(input)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool: expected c x h x w (optionally batched), got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))
    return make_node(
        out, (x,),
        lambda g: (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),), "gap")


def dense(input, weights, bias) -> Tensor:
    """``weights @ input + bias`` for a vector or a batch of row vectors."""
    x, w, b = as_tensor(input), as_tensor(weights), as_tensor(bias)
    if w.ndim != 2:
        raise DimensionError(f"dense: weights must be m x n, got {w.shape}")
    m, n = w.shape
    if x.shape[-1] != n:
        raise DimensionError(f"dense: input axis -1 has {x.shape[-1]}, weights axis 1 has {n}")
    if b.shape != (m,):
        raise DimensionError(f"dense: bias axis 0 has {b.shape}, expected ({m},)")
    out = x.data @ w.data.T + b.data

    def _bw(g):
        gx = g @ w.data
        gw = np.atleast_2d(g).T @ np.atleast_2d(x.data)
        gb = _unbroadcast(g, b.shape)
        return gx, gw, gb

    return make_node(out, (x, w, b), _bw, "dense")


def bce_loss(prediction, label) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps].

    The gradient is evaluated at the clamped value and passed straight
    through, so a saturated sigmoid still receives a learning signal.
    """
    p = as_tensor(prediction)
    y = np.asarray(label, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError(f"labels must be 0 or 1, got {np.unique(y)}")
    y = np.broadcast_to(y, p.shape)
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    count = max(p.size, 1)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / count
    return make_node(
        np.asarray(loss), (p,),
        lambda g: (g * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / count,), "bce")


def dropout(input, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    x = as_tensor(input)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# graph traversal and optimisation
# ---------------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """The recorded graph below a root, in topological order (parents first)."""

    nodes: list[tuple[str, tuple[int, ...], Tensor]] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        index: dict[int, int] = {}
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        seen: set[int] = set()
        while stack:
            node, expanded = stack.pop()
            if expanded:
                index[id(node)] = len(order)
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        graph = cls()
        for node in order:
            graph.nodes.append((node._op, tuple(index[id(p)] for p in node._parents), node))
        return graph


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf below ``root`` that requires it.

    Gradients accumulate into existing leaf buffers.
    """
    if root.size != 1:
        raise ValidationError(f"backward needs a scalar root, got shape {root.shape}")
    if root._backward is None and not root.requires_grad:
        raise StateError("backward called on a tensor that was not produced by a recorded forward pass")
    graph = ComputeGraph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for _, _, node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class SgdState:
    learning_rate: float
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")


def sgd_step(params: Iterable[Tensor], state: SgdState) -> None:
    """In-place ``param -= lr * grad``, then clear the gradients."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError("sgd_step: parameter has no gradient; run backward first")
    for p in params:
        p.data = p.data - state.learning_rate * p.grad
        p.grad = None
    state.step_count += 1


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def finite_diff_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``."""
    if not step > 0:
        raise ValidationError(f"step must be > 0, got {step}")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = function(x)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the check point")
    if out._backward is None:
        analytic = np.zeros_like(base)
    else:
        backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] += step
        up = function(Tensor(shifted.reshape(base.shape))).item()
        shifted[i] -= 2 * step
        down = function(Tensor(shifted.reshape(base.shape))).item()
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric = (up - down) / (2 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
