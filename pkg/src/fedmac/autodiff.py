"""Small reverse-mode differentiation engine over 64-bit numpy arrays.

Only the operations needed by the FedMAC client network are provided. Every
op takes :class:`Tensor` inputs (plain arrays and floats are wrapped as
constants) and, when any input requires a gradient, attaches a node to the
output so that :func:`backward` can walk the graph in reverse topological
order.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, GraphReuseError, NumericError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

NORM_FLOOR = 1e-12


class Node:
    """One recorded operation: its kind, its inputs and a vector-Jacobian rule."""

    __slots__ = ("kind", "inputs", "vjp", "consumed")

    def __init__(self, kind: str, inputs: Tuple["Tensor", ...], vjp: Callable):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node", "meta")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self.node: Optional[Node] = None
        self.meta: Optional[dict] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(kind: str, data: np.ndarray, inputs: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind}: non-finite value in forward output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.meta = None
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.grad = None
    out.node = Node(kind, inputs, vjp) if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", a.data * b.data, (a, b), vjp)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _result("relu", np.where(mask, x.data, 0.0), (x,), vjp)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _result("sigmoid", s, (x,), vjp)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def vjp(g):
        return (g * y,)

    return _result("exp", y, (x,), vjp)


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].reshape(-1)[0])
        raise DomainError(f"log: non-positive input ({bad!r})")

    def vjp(g):
        return (g / x.data,)

    return _result("log", np.log(x.data), (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; 3-d operands are treated as stacks of matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), vjp)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _result("reshape", out, (x,), vjp)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.data.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), vjp)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, ts, vjp)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def take(x: ArrayLike, index) -> Tensor:
    """Slice or gather with numpy indexing; repeated indices accumulate."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {x.shape}") from None
    out = np.array(out, dtype=np.float64)

    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result("slice", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (np.array(_expand(g, x.shape, axis, keepdims)),)

    return _result("sum", np.array(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def vjp(g):
        return (np.array(_expand(g, x.shape, axis, keepdims)) / count,)

    return _result("mean", np.array(x.data.mean(axis=axis, keepdims=keepdims)), (x,), vjp)


# ---------------------------------------------------------------------------
# composite kernels with hand-written derivatives
# ---------------------------------------------------------------------------


def softmax(x: ArrayLike, tau: float = 1.0, exclude: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis of ``x / tau``.

    ``exclude`` is a boolean mask (broadcastable to ``x``); excluded entries
    get probability exactly 0 and do not enter the normaliser.
    """
    x = as_tensor(x)
    if tau <= 0:
        raise ContractError(f"softmax: temperature must be positive, got {tau}")
    z = x.data / tau
    if exclude is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        masked = np.where(exclude, -np.inf, z)
        zmax = masked.max(axis=-1, keepdims=True)
        if np.any(np.isneginf(zmax)):
            raise ContractError("softmax: a row has every entry excluded")
        e = np.exp(masked - zmax)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((p * (g - (p * g).sum(axis=-1, keepdims=True))) / tau,)

    return _result("softmax", p, (x,), vjp)


def cosine_matrix(x: ArrayLike) -> Tensor:
    """Pairwise cosine similarities between the rows of a 2-d tensor.

    Row norms below ``NORM_FLOOR`` are clamped; the number of clamped rows is
    reported in ``out.meta["clamped_rows"]``.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"cosine-similarity-matrix: expected 2-d input, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    clamped = norms < NORM_FLOOR
    denom = np.where(clamped, NORM_FLOOR, norms)[:, None]
    unit = x.data / denom
    s = unit @ unit.T

    def vjp(g):
        d_unit = (g + g.T) @ unit
        radial = (d_unit * unit).sum(axis=1, keepdims=True)
        gx = np.where(clamped[:, None], d_unit, d_unit - unit * radial) / denom
        return (gx,)

    out = _result("cosine-similarity-matrix", s, (x,), vjp)
    out.meta = {"clamped_rows": int(clamped.sum())}
    return out


def conv1d(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """Kernel-3, stride-1, zero-padding-1 convolution.

    Shapes: ``x`` (N, C_in, L), ``weight`` (C_out, C_in, 3), ``bias`` (C_out,).
    Output is (N, C_out, L).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if (
        x.data.ndim != 3
        or weight.data.ndim != 3
        or weight.shape[2] != 3
        or weight.shape[1] != x.shape[1]
        or bias.shape != (weight.shape[0],)
    ):
        raise DimensionError(
            f"conv1d: bad shapes input={x.shape} weight={weight.shape} bias={bias.shape}"
        )
    n, c_in, length = x.shape
    c_out = weight.shape[0]
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1)))
    # cols[n, l, c*3 + k] = padded[n, c, l + k]
    cols = np.stack([padded[:, :, k : k + length] for k in range(3)], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(n, length, c_in * 3)
    w2 = weight.data.reshape(c_out, c_in * 3)
    out = (cols @ w2.T).transpose(0, 2, 1) + bias.data[None, :, None]

    def vjp(g):
        g_nlo = g.transpose(0, 2, 1)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.tensordot(g_nlo, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (g_nlo @ w2).reshape(n, length, c_in, 3).transpose(0, 2, 1, 3)
            gpad = np.zeros_like(padded)
            for k in range(3):
                gpad[:, :, k : k + length] += gcols[..., k]
            gx = gpad[:, :, 1:-1]
        return gx, gw, gb

    return _result("conv1d", np.ascontiguousarray(out), (x, weight, bias), vjp)


def cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross-entropy-with-logits: logits {logits.shape} vs labels {labels.shape}"
        )
    n, c = logits.shape
    if n == 0:
        raise ContractError("cross-entropy-with-logits: empty batch")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"cross-entropy-with-logits: label outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))
    p = np.exp(shifted - lse[:, None])

    def vjp(g):
        grad = p.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _result("cross-entropy-with-logits", np.array(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# graph and backward pass
# ---------------------------------------------------------------------------

OP_KINDS = (
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "concat",
    "slice",
    "reshape",
    "transpose",
    "softmax",
    "log",
    "exp",
    "mean",
    "sum",
    "cosine-similarity-matrix",
    "conv1d",
    "cross-entropy-with-logits",
)

_OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": take,
    "row-softmax-with-temperature": softmax,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "mean": mean,
    "sum": sum_,
    "cosine-similarity-matrix": cosine_matrix,
    "conv1d": conv1d,
    "cross-entropy-with-logits": cross_entropy,
}


def op_forward(kind: str, inputs: Sequence[ArrayLike], **kwargs) -> Tensor:
    """Dispatch an operation by name, e.g. ``op_forward("sigmoid", [x])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **kwargs)


class Graph:
    """Topologically ordered view of everything that produced ``loss``."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: List[Tensor] = _topological(loss)
        self.parameters: Dict[str, Tensor] = {}
        for t in self.nodes:
            if t.node is None and t.requires_grad and t.name is not None:
                self.parameters[t.name] = t

    def backward(self) -> Dict[str, np.ndarray]:
        loss = self.loss
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss.node is not None and loss.node.consumed:
            raise GraphReuseError("backward: graph already consumed")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if t.node is None:
                if g is not None and t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            node = t.node
            if g is not None:
                for inp, gi in zip(node.inputs, node.vjp(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
            node.consumed = True
            node.vjp = None
        for name, p in self.parameters.items():
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"backward: non-finite gradient for {name}")
        return {name: p.grad for name, p in self.parameters.items()}


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in reversed(t.node.inputs):
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) into every named leaf and return them by name.

    When ``params`` is given, parameters the loss does not depend on are
    included with zero gradients so the map is keyed like the full model.
    """
    grads = Graph(loss).backward()
    if params is not None:
        for p in params:
            if p.name not in grads:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                grads[p.name] = p.grad
    return grads
