"""
Dense array numerics shared by every other module:
symmetric eigendecomposition (cyclic Jacobi), a reverse-mode gradient tape
over numpy arrays, and a finite-difference gradient checker.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

JACOBI_MAX_SWEEPS = 100
JACOBI_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-9

# additive attention bias for masked keys; exp() of it underflows to exactly 0
MASK_BIAS = -1e9


class LabError(Exception):
    """Base class for every error raised by the lab."""


class ContractViolation(LabError, ValueError):
    """A documented precondition of an operation does not hold."""


class ConvergenceError(LabError, ArithmeticError):
    """An iterative routine hit its iteration cap."""


class NonFiniteError(LabError, FloatingPointError):
    """An operation produced NaN or Inf."""


def check_finite(value: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return value


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenResult:
    """Eigenvalues sorted descending; column j of `eigenvectors` pairs with eigenvalue j."""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0)))


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first non-negligible component is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        column = out[:, j]
        nonzero = np.flatnonzero(np.abs(column) > 1e-12)
        if nonzero.size and column[nonzero[0]] < 0:
            out[:, j] = -column
    return out


def sym_eig(
    s: np.ndarray,
    tol: float = JACOBI_TOLERANCE,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> EigenResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Always computed in 64-bit. Convergence is declared when the off-diagonal
    Frobenius norm drops below `tol` times the Frobenius norm of the input.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractViolation(f"sym_eig needs a square matrix, got shape {s.shape}")
    scale = float(np.max(np.abs(s))) if s.size else 0.0
    asymmetry = float(np.max(np.abs(s - s.T))) if s.size else 0.0
    if asymmetry > SYMMETRY_TOLERANCE * max(scale, 1.0):
        raise ContractViolation(f"sym_eig needs a symmetric matrix (max |S - S^T| = {asymmetry:.3e})")
    check_finite(s, "sym_eig input")

    n = s.shape[0]
    a = 0.5 * (s + s.T)
    v = np.eye(n)
    frobenius = float(np.linalg.norm(a))
    threshold = tol * (frobenius if frobenius > 0 else 1.0)
    skip_below = threshold / max(n, 1)

    sweeps = 0
    off = _off_diagonal_norm(a)
    while off > threshold:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal residual {off:.3e})"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip_below:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - sn * col_q
                a[:, q] = sn * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - sn * row_q
                a[q, :] = sn * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - sn * vec_q
                v[:, q] = sn * vec_p + c * vec_q
        sweeps += 1
        off = _off_diagonal_norm(a)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    vectors = v[:, order]
    vectors = vectors / np.linalg.norm(vectors, axis=0, keepdims=True)
    return EigenResult(eigenvalues=eigenvalues, eigenvectors=_canonical_signs(vectors), sweeps=sweeps)


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A value recorded on a GradTape."""

    __slots__ = ("value", "tape", "index", "name", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "GradTape", index: int,
                 requires_grad: bool, name: Optional[str] = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return add(self, scale(self._lift(other), -1.0))

    def __rsub__(self, other):
        return add(self._lift(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __repr__(self) -> str:
        label = self.name or f"#{self.index}"
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VJP


class GradTape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Operations are appended in execution order, which is a topological order of
    the graph; `backward` walks it in reverse.
    """

    def __init__(self, dtype=TRAIN_DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: List[_Node] = []
        self.leaves: Dict[str, Tensor] = {}
        self._counter = 0

    def _new(self, value: np.ndarray, requires_grad: bool, name: Optional[str] = None) -> Tensor:
        tensor = Tensor(value, self, self._counter, requires_grad, name)
        self._counter += 1
        return tensor

    def leaf(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ContractViolation(f"leaf '{name}' already registered on this tape")
        array = check_finite(np.array(value, dtype=self.dtype), f"leaf {name}")
        tensor = self._new(array, True, name)
        self.leaves[name] = tensor
        return tensor

    def constant(self, value) -> Tensor:
        return self._new(np.asarray(value, dtype=self.dtype), False)

    def record(self, op: str, inputs: Tuple[Tensor, ...], value: np.ndarray, vjp: VJP) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise ContractViolation(f"{op}: operand belongs to a different tape")
        value = check_finite(np.asarray(value, dtype=self.dtype), op)
        requires_grad = any(t.requires_grad for t in inputs)
        out = self._new(value, requires_grad)
        if requires_grad:
            self.nodes.append(_Node(op, out, inputs, vjp))
        return out


def backward(tape: GradTape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every leaf on the tape.

    The tape itself is left untouched, so replaying it yields identical results.
    """
    if loss.value.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        upstream = grads.pop(node.output.index, None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.vjp(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.asarray(grad, dtype=tape.dtype)
            if tensor.index in grads:
                grads[tensor.index] = grads[tensor.index] + grad
            else:
                grads[tensor.index] = grad
    return {
        name: grads.get(leaf.index, np.zeros_like(leaf.value))
        for name, leaf in tape.leaves.items()
    }


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Primitive operations ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record(
        "mul", (a, b), a.value * b.value,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return a.tape.record("scale", (a,), a.value * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a.tape.record("matmul", (a, b), a.value @ b.value, vjp)


def transpose(a: Tensor) -> Tensor:
    return a.tape.record("transpose", (a,), np.swapaxes(a.value, -1, -2),
                         lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(original),))


def permute(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return a.tape.record("permute", (a,), np.transpose(a.value, axes),
                         lambda g: (np.transpose(g, inverse),))


def sum_all(a: Tensor) -> Tensor:
    return a.tape.record("sum", (a,), np.sum(a.value).reshape(1, 1),
                         lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def mean(a: Tensor, axis: int) -> Tensor:
    count = a.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return a.tape.record("mean", (a,), a.value.mean(axis=axis), vjp)


def exp_clamped(a: Tensor, low: float, high: float) -> Tensor:
    """exp(clip(a, low, high)); the gradient is zero where the clamp is active."""
    clipped = np.clip(a.value, low, high)
    value = np.exp(clipped)
    active = (a.value >= low) & (a.value <= high)
    return a.tape.record("exp_clamped", (a,), value, lambda g: (g * value * active,))


def gelu(a: Tensor) -> Tensor:
    x = a.value
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    tanh = np.tanh(inner)
    value = 0.5 * x * (1.0 + tanh)

    def vjp(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + tanh) + 0.5 * x * (1.0 - tanh ** 2) * d_inner),)

    return a.tape.record("gelu", (a,), value, vjp)


def softmax(a: Tensor, bias: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max-subtraction; `bias` is a constant additive mask."""
    x = a.value if bias is None else a.value + bias
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return a.tape.record("softmax", (a,), p, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    value = xhat * gamma.value + beta.value

    def vjp(g):
        g_xhat = g * gamma.value
        gx = inv_std * (g_xhat - g_xhat.mean(axis=-1, keepdims=True)
                        - xhat * np.mean(g_xhat * xhat, axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return x.tape.record("layer_norm", (x, gamma, beta), value, vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt(np.sum(x.value ** 2, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.value / norm

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return x.tape.record("l2_normalize", (x,), y, vjp)


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of a 2-D table selected by an integer index array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"gather index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return table.tape.record("gather", (table,), table.value[ids], vjp)


def pick_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """From a (B, T, D) tensor take row positions[b] of every batch item -> (B, D)."""
    positions = np.asarray(positions, dtype=np.int64)
    batch = np.arange(x.shape[0])

    def vjp(g):
        grad = np.zeros_like(x.value)
        grad[batch, positions] = g
        return (grad,)

    return x.tape.record("pick", (x,), x.value[batch, positions], vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of each row against its integer label."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits.value - np.max(logits.value, axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_p = shifted - log_z
    value = -np.mean(log_p[np.arange(n), labels])

    def vjp(g):
        grad = np.exp(log_p)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g.reshape(()) / n),)

    return logits.tape.record("cross_entropy", (logits,), np.reshape(value, (1, 1)), vjp)


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Mean elementwise Smooth-L1 (Huber with threshold beta) between a and b."""
    diff = a.value - b.value
    absdiff = np.abs(diff)
    quadratic = absdiff < beta
    value = np.where(quadratic, 0.5 * diff ** 2 / beta, absdiff - 0.5 * beta)
    count = diff.size

    def vjp(g):
        local = np.where(quadratic, diff / beta, np.sign(diff)) * (g.reshape(()) / count)
        return _unbroadcast(local, a.shape), _unbroadcast(-local, b.shape)

    return a.tape.record("smooth_l1", (a, b), np.reshape(value.mean(), (1, 1)), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

ParamInput = Union[np.ndarray, Mapping[str, np.ndarray]]


def _as_dict(x0: ParamInput) -> Tuple[Dict[str, np.ndarray], bool]:
    if isinstance(x0, Mapping):
        return {k: np.array(v, dtype=CHECK_DTYPE) for k, v in x0.items()}, True
    return {"x": np.array(x0, dtype=CHECK_DTYPE)}, False


def _evaluate(f: Callable, params: Dict[str, np.ndarray], as_mapping: bool) -> Tuple[GradTape, Tensor]:
    tape = GradTape(dtype=CHECK_DTYPE)
    leaves = {name: tape.leaf(name, value) for name, value in params.items()}
    loss = f(tape, leaves if as_mapping else leaves["x"])
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise ContractViolation("finite_diff_check: f must return a scalar Tensor")
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("finite_diff_check: f evaluated to a non-finite value")
    return tape, loss


def finite_diff_check(f: Callable, x0: ParamInput, eps: float = 1e-3, stencil: int = 5) -> float:
    """Max relative error between tape gradients and central differences.

    `f(tape, x)` builds a scalar loss on the given 64-bit tape, where `x` is a
    Tensor (array input) or a dict of Tensors (mapping input). The error per
    coordinate is |g_analytic - g_fd| / max(|g_fd|, 1e-8). `stencil` selects the
    3-point or 5-point central difference.
    """
    if stencil not in (3, 5):
        raise ContractViolation("stencil must be 3 or 5")
    params, as_mapping = _as_dict(x0)
    tape, loss = _evaluate(f, params, as_mapping)
    analytic = backward(tape, loss)

    def value_at(name: str, flat_index: int, delta: float) -> float:
        shifted = dict(params)
        array = params[name].copy()
        array.reshape(-1)[flat_index] += delta
        shifted[name] = array
        return _evaluate(f, shifted, as_mapping)[1].item()

    worst = 0.0
    for name, array in params.items():
        grad = analytic[name].reshape(-1)
        for i in range(array.size):
            if stencil == 3:
                fd = (value_at(name, i, eps) - value_at(name, i, -eps)) / (2 * eps)
            else:
                fd = (-value_at(name, i, 2 * eps) + 8 * value_at(name, i, eps)
                      - 8 * value_at(name, i, -eps) + value_at(name, i, -2 * eps)) / (12 * eps)
            error = abs(grad[i] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, error)
    logger.debug("finite_diff_check over %d coordinates: max relative error %.3e",
                 sum(a.size for a in params.values()), worst)
    return worst
