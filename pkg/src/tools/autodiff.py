"""
Dense float64 tensors with reverse-mode differentiation.

Each primitive records its parents and a backward rule mapping the output gradient to one
gradient per parent. ``Tensor.backward`` collects the recorded graph into a :class:`Tape`
(a topological order of the nodes) and replays it in reverse. Only leaves that require a
gradient keep ``.grad`` after the pass.
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.utils.exceptions import DivergenceError, ValidationError

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    # numpy defers binary operators to Tensor when mixed with ndarrays
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardRule] = None,
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    # ------------------------------------------------------------------
    # Differentiation
    # ------------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> "Tape":
        if grad is None:
            if self.size != 1:
                raise ValidationError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.run(self, np.asarray(grad, dtype=np.float64))
        return tape

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def hardtanh(self) -> "Tensor":
        return hardtanh(self)

    def softsign(self) -> "Tensor":
        return softsign(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def square(self) -> "Tensor":
        return square(self)

    def signed_permute(self, source: np.ndarray, sign: np.ndarray) -> "Tensor":
        return signed_permute(self, source, sign)


class Tape:
    """Nodes of one graph in topological order (parents before children)."""

    def __init__(self, nodes: Optional[List[Tensor]] = None):
        self.nodes: List[Tensor] = nodes or []

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run(self, output: Tensor, seed: np.ndarray) -> None:
        """Propagate ``seed`` from ``output`` back to every leaf that requires a gradient."""
        if not output.requires_grad:
            return
        grads: Dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardRule, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, length in enumerate(shape):
        if length == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ValidationError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data**2, b.shape)),
        "div",
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node(a.data**2, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


# ----------------------------------------------------------------------
# Activations
# ----------------------------------------------------------------------
def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out**2),), "tanh")


def hardtanh(a: ArrayLike) -> Tensor:
    """Clip to [-1, 1]."""
    a = as_tensor(a)
    inside = (a.data > -1.0) & (a.data < 1.0)
    return _node(np.clip(a.data, -1.0, 1.0), (a,), lambda g: (g * inside,), "hardtanh")


def softsign(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    denom = 1.0 + np.abs(a.data)
    return _node(a.data / denom, (a,), lambda g: (g / denom**2,), "softsign")


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _node(a.data * positive, (a,), lambda g: (g * positive,), "relu")


# ----------------------------------------------------------------------
# Linear algebra and reductions
# ----------------------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValidationError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ValidationError(f"mean over an empty axis of shape {a.shape}")
    return sum_(a, axis, keepdims) / float(count)


def norm(a: ArrayLike, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data**2, axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a.data,)

    return _node(out, (a,), backward, "norm")


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ValidationError(f"reshape: cannot view {a.shape} as {shape}") from e
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        grad = np.zeros_like(a.data)
        if fancy:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return _node(a.data[index], (a,), backward, "slice")


def concat(tensors: Iterable[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ValidationError(f"concat: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValidationError("stack needs at least one tensor")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ValidationError(f"stack: {e}") from e
    return _node(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
        "stack",
    )


def signed_permute(a: ArrayLike, source: np.ndarray, sign: np.ndarray) -> Tensor:
    """out[..., i] = sign[i] * a[..., source[i]] for a bijective ``source``."""
    a = as_tensor(a)

    def backward(g):
        grad = np.empty_like(g)
        grad[..., source] = g * sign
        return (grad,)

    return _node(a.data[..., source] * sign, (a,), backward, "signed_permute")


Placement = Tuple[Tensor, np.ndarray, Optional[np.ndarray], float]


def assemble(shape: Tuple[int, ...], placements: Sequence[Placement]) -> Tensor:
    """
    Build a matrix (or vector) from signed copies of smaller blocks.

    Each placement ``(block, rows, cols, sign)`` adds ``sign * block`` at ``ix_(rows, cols)``;
    vectors use ``cols=None``. A block may be placed several times.
    """
    out = np.zeros(shape)
    for block, rows, cols, sign in placements:
        target = rows if cols is None else np.ix_(rows, cols)
        if out[target].shape != block.shape:
            raise ValidationError(f"assemble: block of shape {block.shape} does not fit {out[target].shape}")
        out[target] += sign * block.data

    def backward(g):
        grads = []
        for _, rows, cols, sign in placements:
            target = rows if cols is None else np.ix_(rows, cols)
            grads.append(sign * g[target])
        return tuple(grads)

    return _node(out, tuple(p[0] for p in placements), backward, "assemble")


# ----------------------------------------------------------------------
# Finite-difference oracle
# ----------------------------------------------------------------------
def _check_eps(eps: float) -> None:
    if not 1e-7 <= eps <= 1e-4:
        raise ValidationError(f"eps must lie in [1e-7, 1e-4], got {eps}")


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise DivergenceError("non-finite values encountered during gradient check")
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ValidationError(f"gradient check needs a scalar-valued function, got shape {value.shape}")
    result = value.item()
    if not np.isfinite(result):
        raise DivergenceError("non-finite function value during gradient check")
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    _check_eps(eps)
    x0 = np.array(as_tensor(x).data, dtype=np.float64)

    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    _scalar(out)
    if out.requires_grad:
        out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        shifted = x0.copy()
        shifted.flat[i] += eps
        upper = _scalar(f(Tensor(shifted)))
        shifted.flat[i] -= 2 * eps
        lower = _scalar(f(Tensor(shifted)))
        numeric.flat[i] = (upper - lower) / (2 * eps)
    return _relative_error(analytic, numeric)


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Gradient check of a scalar loss against every named parameter (perturbed in place, then restored).

    With ``max_coords`` set, each parameter is checked on at most that many randomly chosen coordinates.
    """
    _check_eps(eps)
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    _scalar(loss)
    if loss.requires_grad:
        loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        coords = np.arange(p.data.size)
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.choice(p.data.size, size=max_coords, replace=False))
        numeric = np.zeros(coords.size)
        for k, i in enumerate(coords):
            original = p.data.flat[i]
            p.data.flat[i] = original + eps
            upper = _scalar(loss_fn())
            p.data.flat[i] = original - eps
            lower = _scalar(loss_fn())
            p.data.flat[i] = original
            numeric[k] = (upper - lower) / (2 * eps)
        errors[name] = _relative_error(analytic[name].reshape(-1)[coords], numeric)
        p.zero_grad()
    return errors
