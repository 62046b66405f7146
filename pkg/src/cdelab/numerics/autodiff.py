"""Dense reverse-mode automatic differentiation over numpy arrays.

Graphs are built define-by-run: every operation returns a new :class:`Tensor`
that remembers its op name, its parents and a closure that pushes the output
gradient back to them. :func:`backward` walks the graph in reverse topological
order. All values are float64 and every op output is checked for NaN/Inf.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the failing op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "name", "_backward")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        op: str = "leaf",
        requires_grad: bool = False,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data, (a, b), "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = Tensor(a.data / b.data, (a, b), "div")

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = bw
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, (x,), "tanh")
    out._backward = lambda g: _accumulate(x, g * (1.0 - y * y))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,), "relu")
    out._backward = lambda g: _accumulate(x, g * mask)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, (x,), "exp")
    out._backward = lambda g: _accumulate(x, g * y)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), (x,), "log")
    out._backward = lambda g: _accumulate(x, g / x.data)
    return out


def abs_(x: Tensor) -> Tensor:
    # subgradient sign(x), 0 at exactly 0
    s = np.sign(x.data)
    out = Tensor(np.abs(x.data), (x,), "abs")
    out._backward = lambda g: _accumulate(x, g * s)
    return out


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y, (x,), "sqrt")
    out._backward = lambda g: _accumulate(x, g * 0.5 / y)
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out._backward = bw
    return out


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for a batch of row vectors."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = Tensor(x.data @ weight.data + bias.data, (x, weight, bias), "affine")

    def bw(g):
        _accumulate(x, g @ weight.data.T)
        _accumulate(weight, x.data.T @ g)
        _accumulate(bias, g.sum(axis=0))

    out._backward = bw
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    out = Tensor(x.data.T, (x,), "transpose")
    out._backward = lambda g: _accumulate(x, g.T)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    out = Tensor(y, (x,), "reshape")
    out._backward = lambda g: _accumulate(x, g.reshape(x.shape))
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    out = Tensor(y, tuple(xs), "concat")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _accumulate(x, piece)

    out._backward = bw
    return out


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along the first axis."""
    idx = np.asarray(index, dtype=np.intp)
    out = Tensor(x.data[idx], (x,), "take_rows")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    out._backward = bw
    return out


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[i, index[i]]`` for every row ``i`` of a matrix."""
    idx = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: index {idx.shape} does not match rows of {x.shape}")
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx], (x,), "pick")

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        _accumulate(x, full)

    out._backward = bw
    return out


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out._backward = bw
    return out


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l1_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sum_(abs_(x), axis=axis, keepdims=keepdims)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    y = n if keepdims else np.squeeze(n, axis=axis)
    out = Tensor(y, (x,), "l2_norm")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        # subgradient 0 at the origin
        safe = np.where(n > 0, n, 1.0)
        _accumulate(x, g * np.where(n > 0, x.data / safe, 0.0))

    out._backward = bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, (x,), "log_softmax")
    p = np.exp(y)

    def bw(g):
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    out._backward = bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stabilised log-sum-exp along ``axis``; entries where ``mask`` is False are excluded."""
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ShapeError("logsumexp: a reduced slice has no unmasked entries")
    m = np.where(mask, x.data, -np.inf).max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x.data - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=axis)
    out = Tensor(y, (x,), "logsumexp")
    w = e / s

    def bw(g):
        _accumulate(x, np.expand_dims(g, axis) * w)

    out._backward = bw
    return out


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with ``eps`` added to each norm."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ {a.shape} vs {b.shape}")
    dot = sum_(mul(a, b), axis=axis)
    na = add(l2_norm(a, axis=axis), eps)
    nb = add(l2_norm(b, axis=axis), eps)
    return div(dot, mul(na, nb))


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    return div(x, add(l2_norm(x, axis=1, keepdims=True), eps))


# ---------------------------------------------------------------- graph walking


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output``, every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    order = topological_order(output)
    for node in order:
        if node.op != "leaf":
            node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad(output: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to ``params`` (zeros if unused)."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(output)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


class Graph:
    """A traced computation over named inputs.

    ``fn`` receives the input tensors as keyword arguments and returns a tensor
    or a dict of named tensors. :meth:`forward` validates the inputs against the
    declared shapes, runs ``fn`` and keeps the node list of the last evaluation.
    """

    def __init__(self, fn: Callable[..., Tensor | dict[str, Tensor]], input_shapes: dict[str, tuple[int, ...]]):
        self.fn = fn
        self.input_shapes = dict(input_shapes)
        self.outputs: dict[str, Tensor] = {}
        self.nodes: list[Tensor] = []

    def forward(self, **inputs) -> dict[str, Tensor]:
        if set(inputs) != set(self.input_shapes):
            raise ShapeError(f"graph inputs {sorted(inputs)} != declared {sorted(self.input_shapes)}")
        tensors = {}
        for key, value in inputs.items():
            t = as_tensor(value)
            if t.shape != tuple(self.input_shapes[key]):
                raise ShapeError(f"graph input '{key}': shape {t.shape} != {tuple(self.input_shapes[key])}")
            tensors[key] = t
        result = self.fn(**tensors)
        self.outputs = result if isinstance(result, dict) else {"output": result}
        seen: dict[int, Tensor] = {}
        for out in self.outputs.values():
            for node in topological_order(out):
                seen.setdefault(id(node), node)
        self.nodes = list(seen.values())
        return self.outputs

    def backward(self, name: str = "output") -> None:
        backward(self.outputs[name])
