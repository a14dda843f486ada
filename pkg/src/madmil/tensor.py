"""Dense 2-D float64 matrices with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its inputs and
a closure pushing gradients back to them (a dynamic tape).  Graphs are
rebuilt for every bag, so variable instance counts need no padding or
masking machinery.  ``backward`` walks the tape once in reverse
topological order and accumulates into ``grad`` of every node it reaches.

Gradient buffers are never mutated in place: accumulation rebinds
``node.grad`` to a fresh array, which lets closures safely hand the same
array to several parents.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyBagError(ValueError):
    """An instance-wise reduction was requested over zero instances."""


def _accumulate(node: "Tensor", delta: np.ndarray) -> None:
    node.grad = delta if node.grad is None else node.grad + delta


class Tensor:
    """A rows x cols matrix of float64 values, recorded on the tape.

    ``requires_grad=False`` marks a constant leaf (e.g. the bag's feature
    matrix); backward skips gradient work on branches no trainable leaf
    feeds.  Operation nodes derive the flag from their inputs.
    """

    __slots__ = ("value", "grad", "op", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Tensor"] = (),
        op: str = "leaf",
        requires_grad: bool | None = None,
    ):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D matrices, got array of ndim {arr.ndim}")
        self.value: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents) if parents else True
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] = _noop

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols}, op={self.op!r})"

    # -- binary ops ----------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.cols != other.rows:
            raise ShapeError(
                f"matmul: inner dimensions differ, {self.shape} x {other.shape}"
            )
        out = Tensor(self.value @ other.value, (self, other), "matmul")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad @ other.value.T)
            if other.requires_grad:
                _accumulate(other, self.value.T @ out.grad)

        out._backward = push
        return out

    def add(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise ShapeError(f"add: shapes differ, {self.shape} vs {other.shape}")
        out = Tensor(self.value + other.value, (self, other), "add")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad)
            if other.requires_grad:
                _accumulate(other, out.grad)

        out._backward = push
        return out

    def add_rowvec(self, row: "Tensor") -> "Tensor":
        """Add a 1 x cols row vector to every row (bias broadcast)."""
        if row.rows != 1 or row.cols != self.cols:
            raise ShapeError(
                f"add_rowvec: expected 1x{self.cols} row, got {row.shape} for {self.shape}"
            )
        out = Tensor(self.value + row.value, (self, row), "add_rowvec")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad)
            if row.requires_grad:
                _accumulate(row, out.grad.sum(axis=0, keepdims=True))

        out._backward = push
        return out

    def mul(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise ShapeError(f"mul: shapes differ, {self.shape} vs {other.shape}")
        out = Tensor(self.value * other.value, (self, other), "mul")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad * other.value)
            if other.requires_grad:
                _accumulate(other, out.grad * self.value)

        out._backward = push
        return out

    # -- unary ops -----------------------------------------------------

    def tanh(self) -> "Tensor":
        out = Tensor(np.tanh(self.value), (self,), "tanh")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad * (1.0 - out.value * out.value))

        out._backward = push
        return out

    def sigm(self) -> "Tensor":
        # tanh form avoids exp overflow for large negative inputs
        out = Tensor(0.5 * (np.tanh(0.5 * self.value) + 1.0), (self,), "sigm")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad * out.value * (1.0 - out.value))

        out._backward = push
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.value, 0.0), (self,), "relu")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad * (self.value > 0.0))

        out._backward = push
        return out

    def transpose(self) -> "Tensor":
        out = Tensor(self.value.T, (self,), "transpose")

        def push():
            if self.requires_grad:
                _accumulate(self, out.grad.T)

        out._backward = push
        return out

    # -- reductions ------------------------------------------------------

    def mean_rows(self) -> "Tensor":
        """Column-wise mean over instances: N x D -> 1 x D."""
        if self.rows == 0:
            raise EmptyBagError("mean_rows over an empty bag")
        out = Tensor(self.value.mean(axis=0, keepdims=True), (self,), "mean_rows")
        n = self.rows

        def push():
            if self.requires_grad:
                _accumulate(self, np.repeat(out.grad / n, n, axis=0))

        out._backward = push
        return out

    def max_rows(self) -> "Tensor":
        """Column-wise max over instances; gradient goes to the lowest
        argmax row of each column (deterministic tie-break)."""
        if self.rows == 0:
            raise EmptyBagError("max_rows over an empty bag")
        out = Tensor(self.value.max(axis=0, keepdims=True), (self,), "max_rows")
        winners = np.argmax(self.value, axis=0)  # first max per column

        def push():
            if self.requires_grad:
                g = np.zeros_like(self.value)
                g[winners, np.arange(self.cols)] = out.grad[0]
                _accumulate(self, g)

        out._backward = push
        return out

    def sum_all(self) -> "Tensor":
        out = Tensor([[self.value.sum()]], (self,), "sum_all")

        def push():
            if self.requires_grad:
                _accumulate(self, np.full_like(self.value, out.grad[0, 0]))

        out._backward = push
        return out

    # -- backward pass ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every node that
        feeds this scalar, visiting each tape node exactly once."""
        if self.shape != (1, 1):
            raise ShapeError(f"backward requires a 1x1 scalar root, got {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones((1, 1))
        for node in reversed(topo):
            node._backward()


def _noop() -> None:
    return None


def softmax_over_instances(scores: Tensor) -> Tensor:
    """Normalize an N x 1 score column into positive weights summing to 1.

    Uses the max-subtraction form, so any constant shift of the scores
    leaves the output unchanged up to rounding.
    """
    if scores.cols != 1:
        raise ShapeError(f"softmax_over_instances expects Nx1 scores, got {scores.shape}")
    if scores.rows == 0:
        raise EmptyBagError("softmax over an empty bag")
    shifted = scores.value - scores.value.max()
    expd = np.exp(shifted)
    out = Tensor(expd / expd.sum(), (scores,), "softmax")

    def push():
        if scores.requires_grad:
            y = out.value
            inner = (out.grad * y).sum()
            _accumulate(scores, y * (out.grad - inner))

    out._backward = push
    return out


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    """Lay tensors with equal row counts side by side, in order."""
    if len(parts) == 0:
        raise ShapeError("concat_columns of an empty list")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(
                f"concat_columns: row counts differ, {p.shape} vs {parts[0].shape}"
            )
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), tuple(parts), "concat")
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def push():
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                _accumulate(part, out.grad[:, lo:hi])

    out._backward = push
    return out


def pad_columns(x: Tensor, width: int) -> Tensor:
    """Zero-pad on the right from x.cols up to ``width`` columns."""
    if width < x.cols:
        raise ShapeError(f"pad_columns: target width {width} < {x.cols}")
    padded = np.zeros((x.rows, width))
    padded[:, : x.cols] = x.value
    out = Tensor(padded, (x,), "pad_columns")

    def push():
        if x.requires_grad:
            _accumulate(x, out.grad[:, : x.cols])

    out._backward = push
    return out


def slice_columns(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.cols):
        raise ShapeError(f"slice_columns: [{start}:{stop}] out of range for {x.shape}")
    out = Tensor(x.value[:, start:stop].copy(), (x,), "slice_columns")

    def push():
        if x.requires_grad:
            g = np.zeros_like(x.value)
            g[:, start:stop] = out.grad
            _accumulate(x, g)

    out._backward = push
    return out


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of ``label``, in log-sum-exp form."""
    if logits.rows != 1:
        raise ShapeError(f"cross_entropy expects 1xC logits, got {logits.shape}")
    if not 0 <= label < logits.cols:
        raise ValueError(f"label {label} out of range for {logits.cols} classes")
    row = logits.value[0]
    m = row.max()
    lse = m + np.log(np.exp(row - m).sum())
    out = Tensor([[lse - row[label]]], (logits,), "cross_entropy")

    def push():
        if logits.requires_grad:
            p = np.exp(row - lse)
            p[label] -= 1.0
            _accumulate(logits, out.grad[0, 0] * p.reshape(1, -1))

    out._backward = push
    return out


def finite_difference_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of d f / d x, entry by entry.

    ``f`` maps an ndarray shaped like ``x`` to a float.  Serves as the
    independent oracle for every backward implementation in this module.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        bumped = x.copy()
        bumped[idx] = x[idx] + step
        f_plus = f(bumped)
        bumped[idx] = x[idx] - step
        f_minus = f(bumped)
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad
