"""Reverse-mode automatic differentiation over double-precision numpy arrays."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

Operand = Union["Tensor", np.ndarray, float, int]


class DiffCoreError(Exception):
    """Base exception for computation graph errors."""


class ContractError(DiffCoreError):
    """Raised when operands violate a shape or argument contract."""


class NumericError(DiffCoreError):
    """Raised when a computation produces NaN or infinite values."""


def _check_finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values produced by '{op}'")
    return values


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph holding a float64 array and its gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[float]],
        requires_grad: bool = False,
        name: str = "",
        _parents: Tuple["Tensor", ...] = (),
        _op: str = "",
    ) -> None:
        self.data = _check_finite(np.asarray(data, dtype=np.float64), _op or "leaf")
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if requires_grad and not _parents else None
        )
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Back-propagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return

        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._parents:
                node.grad = None

    def __repr__(self) -> str:
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions carry the real definitions.
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    values: np.ndarray,
    parents: Tuple[Tensor, ...],
    op: str,
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=tracked, _parents=parents if tracked else (), _op=op)
    if tracked:
        out._backward = backward
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad, a.shape))
        b._accumulate(_unbroadcast(grad, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad, a.shape))
        b._accumulate(_unbroadcast(-grad, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad * b.data, a.shape))
        b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")

    def backward(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad / b.data, a.shape))
        b._accumulate(_unbroadcast(-grad * a.data / (b.data**2), b.shape))

    return _result(a.data / b.data, (a, b), "div", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad @ b.data.T)
        b._accumulate(a.data.T @ grad)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Multiply a constant sparse matrix by a tensor."""
    if x.data.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ContractError(f"sparse_matmul: incompatible shapes {matrix.shape} and {x.shape}")
    csr = sp.csr_matrix(matrix)

    def backward(grad: np.ndarray) -> None:
        x._accumulate(np.asarray(csr.T @ grad))

    return _result(np.asarray(csr @ x.data), (x,), "sparse_matmul", backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim == 1:
        return reshape(x, (x.shape[0], 1))
    if x.data.ndim != 2:
        raise ContractError(f"transpose: expected a matrix, got shape {x.shape}")

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad.T)

    return _result(x.data.T, (x,), "transpose", backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        values = x.data.reshape(shape)
    except ValueError as e:
        raise ContractError(f"reshape: cannot reshape {x.shape} into {shape}") from e

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad.reshape(x.shape))

    return _result(values, (x,), "reshape", backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    factor = np.where(positive, 1.0, slope)

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad * factor)

    return _result(x.data * factor, (x,), "leaky_relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    values = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad * values * (1.0 - values))

    return _result(values, (x,), "sigmoid", backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = np.exp(x.data)

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad * values)

    return _result(values, (x,), "exp", backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad / x.data)

    return _result(np.log(x.data), (x,), "log", backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("sqrt: non-positive input has no finite derivative")
    values = np.sqrt(x.data)

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad * 0.5 / values)

    return _result(values, (x,), "sqrt", backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad * keep)

    return _result(np.maximum(x.data, floor), (x,), "clamp_min", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)

    def backward(grad: np.ndarray) -> None:
        inner = (grad * values).sum(axis=axis, keepdims=True)
        x._accumulate(values * (grad - inner))

    return _result(values, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    values = shifted - logsum
    probs = np.exp(values)

    def backward(grad: np.ndarray) -> None:
        x._accumulate(grad - probs * grad.sum(axis=axis, keepdims=True))

    return _result(values, (x,), "log_softmax", backward)


def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    values = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad: np.ndarray) -> None:
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        x._accumulate(np.broadcast_to(grad, x.shape))

    return _result(values, (x,), "sum", backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    if count == 0:
        raise ContractError(f"mean: empty reduction over shape {x.shape}")
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: no tensors given")
    try:
        values = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ContractError(f"concat: incompatible shapes {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(grad, bounds, axis=axis)):
            t._accumulate(piece)

    return _result(values, tuple(tensors), "concat", backward)


def gather_rows(x: Tensor, indices: Union[Sequence[int], np.ndarray]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def backward(grad: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, idx, grad)
        x._accumulate(full)

    return _result(x.data[idx], (x,), "gather_rows", backward)


def pick(x: Tensor, columns: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Select ``x[r, columns[r]]`` for every row ``r``."""
    cols = np.asarray(columns, dtype=np.int64)
    if x.data.ndim != 2 or cols.shape != (x.shape[0],):
        raise ContractError(f"pick: need one column per row, got {x.shape} and {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise IndexError(f"pick: column index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])

    def backward(grad: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), grad)
        x._accumulate(full)

    return _result(x.data[rows, cols], (x,), "pick", backward)


def dropout(
    x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: a random generator is required in training mode")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


@dataclass
class GradCheckFailure:
    """One coordinate whose analytic gradient disagrees with finite differences."""

    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients with central differences."""

    tol: float
    h: float
    max_rel_error: float = 0.0
    checked: int = 0
    failures: List[GradCheckFailure] = field(default_factory=list)
    per_parameter: Dict[str, float] = field(default_factory=dict)
    dead_parameters: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "h": self.h,
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "per_parameter": dict(self.per_parameter),
            "dead_parameters": list(self.dead_parameters),
            "failures": [
                {
                    "name": f.name,
                    "index": list(f.index),
                    "analytic": f.analytic,
                    "numeric": f.numeric,
                    "rel_error": f.rel_error,
                }
                for f in self.failures
            ],
        }


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """
    Compare analytic gradients of ``f`` with central finite differences.

    Args:
        f: Deterministic scalar-valued computation over ``params``
        params: Named leaf tensors to perturb
        h: Finite-difference step
        tol: Maximum accepted relative error

    Returns:
        GradCheckReport listing every failing coordinate
    """
    for tensor in params.values():
        tensor.zero_grad()
    f().backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    report = GradCheckReport(tol=tol, h=h)
    for name, tensor in params.items():
        worst = 0.0
        for index in np.ndindex(tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + h
            plus = f().item()
            tensor.data[index] = original - h
            minus = f().item()
            tensor.data[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = float(analytic[name][index])
            rel = abs(exact - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
            report.checked += 1
            if rel > tol:
                report.failures.append(GradCheckFailure(name, index, exact, numeric, rel))
        report.per_parameter[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        if not np.any(np.abs(analytic[name]) > 1e-12):
            report.dead_parameters.append(name)

    logger.info(
        "Gradient check over %d coordinates: max relative error %.3e (tol %.1e)",
        report.checked,
        report.max_rel_error,
        tol,
    )
    return report
