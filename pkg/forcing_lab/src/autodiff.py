"""Define-by-run reverse-mode automatic differentiation over float64 arrays"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# Innermost entry is the active tape; None means recording is disabled.
_TAPE_STACK: List[Optional["Tape"]] = []


class Tensor:
    """
    Shaped float64 array with an optional gradient.

    Leaves (parameters, inputs) have `node_id is None`; tensors produced by
    a primitive while a tape is active carry the id of the node that made
    them on that tape.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Constant copy of the values; gradients never flow through it."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return slice_(self, key)


@dataclass
class Node:
    """One recorded primitive application."""

    node_id: int
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: Dict = field(default_factory=dict)


class Tape:
    """Append-only record of primitive applications, in topological order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, ctx: Dict) -> Node:
        node = Node(node_id=len(self.nodes), kind=kind, inputs=tuple(inputs), output=output, ctx=ctx)
        output.node_id = node.node_id
        output._tape = self
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


class no_grad:
    """Context manager that disables recording (inference and rollouts)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], **ctx) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value in forward output", kind=kind)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, ctx)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError("operands cannot be broadcast together", kind=kind, shapes=[a.shape, b.shape])


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ContractError("inner dimensions do not match", kind="matmul", shapes=[a.shape, b.shape])
    return _emit("matmul", a.data @ b.data, (a, b))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("nothing to concatenate", kind="concat")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractError("incompatible shapes", kind="concat", shapes=[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", data, tensors, axis=axis, sizes=sizes)


def slice_(x: ArrayLike, key) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data[key]
    except IndexError:
        raise ContractError(f"index {key!r} out of range", kind="slice", shapes=[x.shape])
    return _emit("slice", np.array(data, dtype=np.float64), (x,), key=key)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ContractError(f"cannot reshape to {tuple(shape)}", kind="reshape", shapes=[x.shape])
    return _emit("reshape", data.copy(), (x,))


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("tanh", np.tanh(x.data), (x,))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * x.data)), (x,))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("relu", np.maximum(x.data, 0.0), (x,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        return _emit("exp", np.exp(x.data), (x,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _emit("log", np.log(x.data), (x,))


def abs_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,))


def clamp_min(x: ArrayLike, floor: float) -> Tensor:
    x = as_tensor(x)
    return _emit("clamp_min", np.maximum(x.data, floor), (x,), floor=floor)


def sum_(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), axis=axis, keepdims=keepdims)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), axis=axis, keepdims=keepdims)


def softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits", kind="softmax")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _emit("softmax", e / e.sum(axis=axis, keepdims=True), (logits,), axis=axis)


def log_softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits", kind="log_softmax")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _emit("log_softmax", out, (logits,), axis=axis)


def conv1d(x: ArrayLike, weight: ArrayLike) -> Tensor:
    """
    Same-length 1-D convolution along the time axis.

    Args:
        x: (L, C_in) sequence.
        weight: (F, C_in, K) filters; K may be even (extra pad goes right).

    Returns:
        (L, F) feature sequence.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise ContractError("expected x (L, C_in) and weight (F, C_in, K)", kind="conv1d",
                            shapes=[x.shape, weight.shape])
    length, kernel = x.shape[0], weight.shape[2]
    left = (kernel - 1) // 2
    padded = np.pad(x.data, ((left, kernel - 1 - left), (0, 0)))
    out = np.zeros((length, weight.shape[0]))
    for k in range(kernel):
        out += padded[k:k + length] @ weight.data[:, :, k].T
    return _emit("conv1d", out, (x, weight), padded=padded, left=left)


def embedding_lookup(table: ArrayLike, indices: Sequence[int]) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ContractError(f"indices {idx.tolist()} outside table", kind="embedding_lookup",
                            shapes=[table.shape])
    return _emit("embedding_lookup", table.data[idx], (table,), indices=idx)


FORWARD_RULES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "concat": concat,
    "slice": slice_, "reshape": reshape, "tanh": tanh, "sigmoid": sigmoid,
    "relu": relu, "exp": exp, "log": log, "abs": abs_, "clamp_min": clamp_min,
    "sum": sum_, "mean": mean, "softmax": softmax, "log_softmax": log_softmax,
    "conv1d": conv1d, "embedding_lookup": embedding_lookup,
}


def primitive_forward(kind: str, inputs: Sequence[ArrayLike], **attrs) -> Tensor:
    """Apply primitive `kind` by name; concat takes the whole input list."""
    if kind not in FORWARD_RULES:
        raise ContractError(f"unknown primitive '{kind}'", kind=kind)
    if kind == "concat":
        return concat(inputs, **attrs)
    return FORWARD_RULES[kind](*inputs, **attrs)


def stack(tensors: Sequence[ArrayLike]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# Backward rules: rule(grad_output, node) -> one gradient (or None) per input
# ---------------------------------------------------------------------------

def _add_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _matmul_backward(g, node):
    a, b = node.inputs
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.data.T, a.data.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b.data @ g, np.outer(a.data, g)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b.data), a.data.T @ g
    return g * b.data, g * a.data


def _concat_backward(g, node):
    bounds = np.cumsum(node.ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=node.ctx["axis"]))


def _slice_backward(g, node):
    (x,) = node.inputs
    full = np.zeros_like(x.data)
    np.add.at(full, node.ctx["key"], g)
    return (full,)


def _reshape_backward(g, node):
    return (g.reshape(node.inputs[0].shape),)


def _tanh_backward(g, node):
    return (g * (1.0 - node.output.data ** 2),)


def _sigmoid_backward(g, node):
    y = node.output.data
    return (g * y * (1.0 - y),)


def _relu_backward(g, node):
    return (g * (node.inputs[0].data > 0.0),)


def _exp_backward(g, node):
    return (g * node.output.data,)


def _log_backward(g, node):
    return (g / node.inputs[0].data,)


def _abs_backward(g, node):
    return (g * np.sign(node.inputs[0].data),)


def _clamp_min_backward(g, node):
    return (g * (node.inputs[0].data >= node.ctx["floor"]),)


def _restore_reduced(g, node):
    axis, keepdims = node.ctx["axis"], node.ctx["keepdims"]
    shape = node.inputs[0].shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _sum_backward(g, node):
    return (_restore_reduced(g, node),)


def _mean_backward(g, node):
    shape = node.inputs[0].shape
    axis = node.ctx["axis"]
    count = int(np.prod(shape)) if axis is None else shape[axis]
    return (_restore_reduced(g, node) / count,)


def _softmax_backward(g, node):
    y, axis = node.output.data, node.ctx["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_backward(g, node):
    axis = node.ctx["axis"]
    probs = np.exp(node.output.data)
    return (g - probs * g.sum(axis=axis, keepdims=True),)


def _conv1d_backward(g, node):
    x, weight = node.inputs
    padded, left = node.ctx["padded"], node.ctx["left"]
    length, kernel = x.shape[0], weight.shape[2]
    grad_padded = np.zeros_like(padded)
    grad_w = np.zeros_like(weight.data)
    for k in range(kernel):
        grad_padded[k:k + length] += g @ weight.data[:, :, k]
        grad_w[:, :, k] = g.T @ padded[k:k + length]
    return grad_padded[left:left + length], grad_w


def _embedding_backward(g, node):
    (table,) = node.inputs
    grad = np.zeros_like(table.data)
    np.add.at(grad, node.ctx["indices"], g)
    return (grad,)


BACKWARD_RULES: Dict[str, Callable] = {
    "add": _add_backward, "sub": _sub_backward, "mul": _mul_backward,
    "matmul": _matmul_backward, "concat": _concat_backward, "slice": _slice_backward,
    "reshape": _reshape_backward, "tanh": _tanh_backward, "sigmoid": _sigmoid_backward,
    "relu": _relu_backward, "exp": _exp_backward, "log": _log_backward,
    "abs": _abs_backward, "clamp_min": _clamp_min_backward, "sum": _sum_backward,
    "mean": _mean_backward, "softmax": _softmax_backward,
    "log_softmax": _log_softmax_backward, "conv1d": _conv1d_backward,
    "embedding_lookup": _embedding_backward,
}


def backward(tape: Tape, loss: Tensor) -> None:
    """
    Propagate d(loss)/d(.) to every tracked leaf reachable from `loss`.

    Leaf gradients accumulate into `Tensor.grad`; call `zero_grad` between
    independent steps.
    """
    if loss.size != 1:
        raise ContractError("loss must be a scalar", kind="backward", shapes=[loss.shape])

    if loss.node_id is None or loss._tape is not tape:
        if loss.requires_grad and loss.node_id is None:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[:loss.node_id + 1]):
        grad_out = pending.pop(node.node_id, None)
        if grad_out is None:
            continue
        input_grads = BACKWARD_RULES[node.kind](grad_out, node)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
            if tensor._tape is tape and tensor.node_id is not None:
                if tensor.node_id in pending:
                    pending[tensor.node_id] = pending[tensor.node_id] + grad
                else:
                    pending[tensor.node_id] = grad
            elif tensor.node_id is None:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """
    Compare analytic gradients of scalar `f(*inputs)` against central differences.

    Returns:
        max over all input components of
        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]", kind="grad_check")

    for tensor in inputs:
        tensor.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        backward(tape, out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    with no_grad():
        for tensor, exact in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            exact_flat = exact.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = as_tensor(f(*inputs)).item()
                flat[i] = original - h
                minus = as_tensor(f(*inputs)).item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                denom = max(abs(exact_flat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(exact_flat[i] - numeric) / denom)
    logger.debug(f"grad_check over {len(inputs)} inputs: max relative error {worst:.3e}")
    return worst
