"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is a tape rebuilt on every forward pass: each op wires the output
tensor to its parents together with a vector-Jacobian closure, and a backward
pass is one reverse topological sweep over whatever the step just built.
Everything is float64 because verification compares gradients against central
finite differences and analytic identities at tolerances float32 cannot hold.

Scope is deliberately small: 2-d matmul, elementwise arithmetic with numpy
broadcasting up to 2-d, the activations and reductions the models need, and a
row-permutation op whose adjoint is the inverse permutation. Gradients for a
reused subgraph accumulate by summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GradientNanError(RuntimeError):
    """Raised when a backward sweep produces a NaN gradient."""

    def __init__(self, op: str):
        super().__init__(f"NaN gradient produced in backward of op '{op}'")
        self.op = op


class MissingGradError(RuntimeError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ValueError(f"tensors are at most 2-d, got shape {arr.shape}")
    return arr


class Tensor:
    """Node in the autodiff graph.

    ``_vjps`` holds (parent, closure) pairs; the closure maps the output
    gradient to that parent's gradient contribution. Leaves have no vjps.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_vjps")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", _vjps=()):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._vjps = _vjps

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        table = _sweep(self)
        for node, g in table:
            if node.requires_grad and not node._vjps:
                node.grad = g if node.grad is None else node.grad + g

    # operator sugar -------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, vjps) -> Tensor:
    # Interior nodes only track gradients if some ancestor needs them; this
    # prunes backward sweeps through constant subgraphs.
    needs = any(p.requires_grad for p, _ in vjps)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._vjps = tuple((p, fn) for p, fn in vjps if p.requires_grad)
    return out


def _sweep(root: Tensor):
    """Reverse topological sweep; returns [(node, grad)] for reachable nodes."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    out: list[tuple[Tensor, np.ndarray]] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if np.isnan(g).any():
            raise GradientNanError(node.op)
        out.append((node, g))
        for parent, fn in node._vjps:
            contrib = fn(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return out


def gradients(root: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar root for the given tensors, without touching .grad.

    Tensors unreachable from the root get zeros. Used by the game-strategy
    routing, which scales and accumulates these manually.
    """
    if root.data.size != 1:
        raise ValueError("gradients requires a scalar root")
    table = {id(n): g for n, g in _sweep(root)}
    return [table.get(id(p), np.zeros_like(p.data)) for p in wrt]


# elementwise and linear ops ------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the operand's shape (inverse of numpy broadcast)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        "add",
        [(a, lambda g: _unbroadcast(g, a.data.shape)), (b, lambda g: _unbroadcast(g, b.data.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data - b.data,
        "sub",
        [(a, lambda g: _unbroadcast(g, a.data.shape)), (b, lambda g: _unbroadcast(-g, b.data.shape))],
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data / b.data,
        "div",
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    return _make(
        a.data @ b.data,
        "matmul",
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make(a.data.T, "transpose", [(a, lambda g: g.T)])


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), "relu", [(a, lambda g: g * mask)])


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)
    return _make(t, "tanh", [(a, lambda g: g * (1.0 - t * t))])


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)
    return _make(e, "exp", [(a, lambda g: g * e)])


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), "log", [(a, lambda g: g / a.data)])


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    s = np.sqrt(a.data)
    return _make(s, "sqrt", [(a, lambda g: g * (0.5 / s))])


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = _wrap(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), "clip_min", [(a, lambda g: g * mask)])


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(out, "sum", [(a, vjp)])


def tmean(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    return _make(a.data.mean(), "mean", [(a, lambda g: np.broadcast_to(g / n, a.data.shape).copy())])


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise ValueError("concat_cols expects 2-d operands")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    vjps = []
    for k, p in enumerate(parts):
        lo, hi = int(offsets[k]), int(offsets[k + 1])
        vjps.append((p, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
    return _make(np.concatenate([p.data for p in parts], axis=1), "concat_cols", vjps)


def permute_rows(a: Tensor, sigma: np.ndarray) -> Tensor:
    """Row i of the output is row sigma[i] of the input.

    The adjoint routes gradient row i back to input row sigma[i], which is the
    inverse permutation applied to the output gradient.
    """
    a = _wrap(a)
    sigma = np.asarray(sigma)
    n = a.data.shape[0]
    if sigma.shape != (n,) or not np.array_equal(np.sort(sigma), np.arange(n)):
        raise ValueError("sigma must be a permutation of range(n_rows)")

    def vjp(g):
        out = np.zeros_like(a.data)
        out[sigma] = g
        return out

    return _make(a.data[sigma], "permute_rows", [(a, vjp)])


def softmax_rows(a: Tensor) -> Tensor:
    # Shifting by the row max is gradient-neutral, so the shift is a constant.
    shift = Tensor(a.data.max(axis=1, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=1, keepdims=True))


def log_softmax_rows(a: Tensor) -> Tensor:
    shift = Tensor(a.data.max(axis=1, keepdims=True))
    s = sub(a, shift)
    return sub(s, log(tsum(exp(s), axis=1, keepdims=True)))


# optimizer ------------------------------------------------------------------


@dataclass
class ParamGroup:
    """Named set of trainable tensors; every trainable tensor sits in exactly one.

    ``role`` tags the game-strategy routing target: "encoder-<m>", "fusion",
    "uni-head-<m>" or "recon-head". ``lr_scale`` supports per-group learning
    rates (encoder fine-tuning uses 0.1).
    """

    name: str
    params: list[Tensor] = field(default_factory=list)
    role: str = ""
    lr_scale: float = 1.0


def sgd_step(
    groups: list[ParamGroup],
    lr: float,
    weight_decay: float = 0.0,
    momentum: float = 0.0,
    velocity: dict[int, np.ndarray] | None = None,
) -> None:
    """One plain SGD update over all groups; grads are consumed (reset to None).

    ``velocity`` is caller-owned state keyed by id(param); required only when
    momentum > 0.
    """
    if momentum > 0.0 and velocity is None:
        raise ValueError("momentum requires a velocity buffer")
    for group in groups:
        step = lr * group.lr_scale
        for p in group.params:
            if p.grad is None:
                raise MissingGradError(f"param in group '{group.name}' has no gradient")
            g = p.grad + weight_decay * p.data if weight_decay else p.grad
            if momentum > 0.0:
                v = velocity.get(id(p))
                v = g if v is None else momentum * v + g
                velocity[id(p)] = v
                g = v
            p.data -= step * g
            p.grad = None


def zero_grads(groups: list[ParamGroup]) -> None:
    for group in groups:
        for p in group.params:
            p.grad = None
