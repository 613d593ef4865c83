"""
Minimal reverse-mode automatic differentiation over dense 2-D float64 matrices.

A Tape is rebuilt for every forward pass (define-by-run). Each primitive
records a Node holding its value, a zero-initialized gradient of the same
shape and a closure that pushes the node's gradient into its inputs.

Includes:
- Tape / Node: graph containers
- matmul, add, sub, mul, add_bias, tanh, relu, scale, shift, elementwise
- sum_all, mean_all, row_sum, take_rows, concat_cols, concat_rows
- l2_normalize, row_norm, cosine, softmax_cross_entropy, grad_reverse
- backward: Accumulates dL/d(node) for every node on the tape.
"""

from typing import Callable, List, Optional, Sequence

import numpy as np

from .constants import NORM_EPS
from .errors import MixerError


class DimensionError(MixerError):
    """Raised when operand shapes do not agree."""


class DegenerateVectorError(MixerError):
    """Raised when a vector norm falls below NORM_EPS."""


class LabelError(MixerError):
    """Raised when a class label is outside the logits' range."""


class ContractError(MixerError):
    """Raised when an operation is used outside its contract."""


def as_matrix(value) -> np.ndarray:
    """Coerce scalars, vectors and matrices to a 2-D float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "tape", "index", "_backward")

    def __init__(self, tape: "Tape", op: str, inputs: Sequence["Node"], value: np.ndarray,
                 backward_fn: Optional[Callable[[np.ndarray], None]]):
        self.tape = tape
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = np.zeros_like(value)
        self.index = len(tape.nodes)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Append-only record of nodes in creation (topological) order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, op: str, inputs: Sequence[Node], value: np.ndarray,
               backward_fn: Optional[Callable[[np.ndarray], None]] = None) -> Node:
        for parent in inputs:
            if parent.tape is not self:
                raise ContractError("operands belong to a different tape")
        node = Node(self, op, inputs, value, backward_fn)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Record a differentiable input (parameter or feature matrix)."""
        return self.record("leaf", (), as_matrix(value))

    def constant(self, value) -> Node:
        return self.record("const", (), as_matrix(value))

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad.fill(0.0)


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for node in nodes[1:]:
        if node.tape is not tape:
            raise ContractError("operands belong to a different tape")
    return tape


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)

    def _backward(g: np.ndarray) -> None:
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return tape.record("matmul", (a, b), a.value @ b.value, _backward)


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")

    def _backward(g: np.ndarray) -> None:
        a.grad += g
        b.grad += g

    return _tape_of(a, b).record("add", (a, b), a.value + b.value, _backward)


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def _backward(g: np.ndarray) -> None:
        a.grad += g
        b.grad -= g

    return _tape_of(a, b).record("sub", (a, b), a.value - b.value, _backward)


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")

    def _backward(g: np.ndarray) -> None:
        a.grad += g * b.value
        b.grad += g * a.value

    return _tape_of(a, b).record("mul", (a, b), a.value * b.value, _backward)


def add_bias(x: Node, bias: Node) -> Node:
    """Row-bias addition: every row of `x` (B x n) gets the 1 x n `bias`."""
    if bias.shape[0] != 1 or bias.shape[1] != x.shape[1]:
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not fit {x.shape}")

    def _backward(g: np.ndarray) -> None:
        x.grad += g
        bias.grad += g.sum(axis=0, keepdims=True)

    return _tape_of(x, bias).record("add_bias", (x, bias), x.value + bias.value, _backward)


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)

    def _backward(g: np.ndarray) -> None:
        x.grad += g * (1.0 - out * out)

    return x.tape.record("tanh", (x,), out, _backward)


def relu(x: Node) -> Node:
    mask = x.value > 0.0

    def _backward(g: np.ndarray) -> None:
        x.grad += g * mask

    return x.tape.record("relu", (x,), np.where(mask, x.value, 0.0), _backward)


def scale(x: Node, c: float) -> Node:
    c = float(c)

    def _backward(g: np.ndarray) -> None:
        x.grad += c * g

    return x.tape.record("scale", (x,), c * x.value, _backward)


def shift(x: Node, c: float) -> Node:
    """Add the constant `c` to every entry."""
    c = float(c)

    def _backward(g: np.ndarray) -> None:
        x.grad += g

    return x.tape.record("shift", (x,), x.value + c, _backward)


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"tanh": tanh, "relu": relu}


def elementwise(kind: str, *operands: Node, c: Optional[float] = None) -> Node:
    """Dispatch one of add, sub, mul, tanh, relu, scale(c)."""
    if kind in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{kind} takes two operands")
        return _BINARY[kind](*operands)
    if kind in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](operands[0])
    if kind == "scale":
        if len(operands) != 1 or c is None:
            raise ContractError("scale takes one operand and a constant c")
        return scale(operands[0], c)
    raise ContractError(f"unknown elementwise kind '{kind}'")


def sum_all(x: Node) -> Node:
    def _backward(g: np.ndarray) -> None:
        x.grad += g[0, 0]

    return x.tape.record("sum", (x,), np.array([[x.value.sum()]]), _backward)


def mean_all(x: Node) -> Node:
    n = x.value.size
    if n == 0:
        raise ContractError("mean of an empty matrix")

    def _backward(g: np.ndarray) -> None:
        x.grad += g[0, 0] / n

    return x.tape.record("mean", (x,), np.array([[x.value.sum() / n]]), _backward)


def row_sum(x: Node) -> Node:
    def _backward(g: np.ndarray) -> None:
        x.grad += g

    return x.tape.record("row_sum", (x,), x.value.sum(axis=1, keepdims=True), _backward)


def take_rows(x: Node, index) -> Node:
    """Gather rows by integer index; repeated indices accumulate on the way back."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)

    def _backward(g: np.ndarray) -> None:
        np.add.at(x.grad, idx, g)

    return x.tape.record("take_rows", (x,), x.value[idx], _backward)


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ {a.shape} vs {b.shape}")
    split = a.shape[1]

    def _backward(g: np.ndarray) -> None:
        a.grad += g[:, :split]
        b.grad += g[:, split:]

    return _tape_of(a, b).record("concat_cols", (a, b), np.hstack([a.value, b.value]), _backward)


def concat_rows(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise DimensionError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def _backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p.grad += g[lo:hi]

    return _tape_of(*parts).record("concat_rows", tuple(parts), np.vstack([p.value for p in parts]), _backward)


def l2_normalize(v: Node) -> Node:
    """
    Normalize every row to unit L2 norm. Backward applies the projection
    Jacobian (I - v_hat v_hat^T) / |v| row by row.
    """
    norms = np.sqrt((v.value * v.value).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("l2_normalize: row norm below epsilon")
    out = v.value / norms

    def _backward(g: np.ndarray) -> None:
        radial = (g * out).sum(axis=1, keepdims=True)
        v.grad += (g - out * radial) / norms

    return v.tape.record("l2_normalize", (v,), out, _backward)


def row_norm(v: Node) -> Node:
    """Row-wise Euclidean norm (B x 1); zero subgradient at the origin."""
    norms = np.sqrt((v.value * v.value).sum(axis=1, keepdims=True))
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    direction = np.where(norms > NORM_EPS, v.value / safe, 0.0)

    def _backward(g: np.ndarray) -> None:
        v.grad += g * direction

    return v.tape.record("row_norm", (v,), norms, _backward)


def cosine(u: Node, v: Node) -> Node:
    """Row-wise cosine similarity (B x 1) of two equally shaped matrices."""
    _same_shape(u, v, "cosine")
    return row_sum(mul(l2_normalize(u), l2_normalize(v)))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """
    Mean over rows of -log softmax(logits)[label], stabilized by
    subtracting the row maximum.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows, classes = logits.shape
    if y.shape[0] != rows:
        raise DimensionError(f"softmax_cross_entropy: {rows} rows but {y.shape[0]} labels")
    if rows == 0:
        raise ContractError("softmax_cross_entropy of an empty batch")
    if np.any(y < 0) or np.any(y >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")

    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -log_probs[np.arange(rows), y].mean()
    probs = exp / denom

    def _backward(g: np.ndarray) -> None:
        d = probs.copy()
        d[np.arange(rows), y] -= 1.0
        logits.grad += g[0, 0] * d / rows

    return logits.tape.record("softmax_ce", (logits,), np.array([[loss]]), _backward)


def grad_reverse(x: Node, coeff: float = 1.0) -> Node:
    """Identity forward; backward multiplies the incoming gradient by -coeff."""
    c = float(coeff)
    if c < 0.0:
        raise ContractError("grad_reverse coefficient must be nonnegative")

    def _backward(g: np.ndarray) -> None:
        x.grad += g * (-c)

    return x.tape.record("grad_reverse", (x,), x.value.copy(), _backward)


def backward(tape: Tape, root: Node) -> None:
    """
    Propagate dL/d(root) = 1 through every node recorded up to `root`.
    Gradients accumulate additively over fan-out.
    """
    if root.tape is not tape:
        raise ContractError("root does not belong to this tape")
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")

    root.grad += 1.0
    for node in reversed(tape.nodes[: root.index + 1]):
        if node._backward is not None:
            node._backward(node.grad)
