"""Tensor container and the gradient tape.

A ``Tensor`` wraps a numpy array (float32 or float64, rank <= 4).  Operations
from :mod:`bevseg.autodiff.ops` record themselves onto the currently active
``Tape``; calling :func:`backward` replays the tape once in reverse and
accumulates adjoints into ``.grad`` of every tensor that asked for them.

Nothing is recorded when no tape is active, so plain evaluation (validation
forward passes, benchmarking) runs at raw numpy speed and allocates no
gradient bookkeeping at all.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from bevseg.errors import NumericError

FLOAT_DTYPES = (np.float32, np.float64)
MAX_RANK = 4

# Stack of active tapes; ops record onto the innermost one.
_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float array that can participate in reverse-mode differentiation.

    ``data`` is the value, ``grad`` (numpy array or None) is filled in by
    :func:`backward`.  Gradients accumulate additively: call
    :meth:`zero_grad` between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    # -- inspection ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- gradient bookkeeping ----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """Same values, no tape participation downstream."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t


class TapeNode:
    """One recorded operation: output, inputs, and the adjoint rule."""

    __slots__ = ("out", "inputs", "backward_fn", "name")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
                 name: str = ""):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of operations, replayed in reverse by :func:`backward`.

    Use as a context manager::

        with Tape() as tape:
            y = ops.mul(x, x)
        backward(tape, y)
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn, name: str = "") -> None:
        self.nodes.append(TapeNode(out, inputs, backward_fn, name))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise RuntimeError("tape stack corrupted: tapes must exit in reverse entry order")
        _TAPE_STACK.pop()
        return False


def record_op(out: Tensor, inputs: Sequence[Tensor], backward_fn, name: str = "") -> Tensor:
    """Register ``out = op(inputs)`` on the active tape, if any.

    The output requires a gradient exactly when some input does and a tape is
    listening; otherwise the op leaves no trace.
    """
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn, name)
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Reverse-replay ``tape`` from scalar ``root``, accumulating ``.grad``.

    Each recorded node is visited exactly once, in reverse recording order,
    which is a valid topological order of the forward graph.  Fan-out adds:
    a tensor consumed by several later ops receives the sum of their
    contributions before its own producer runs.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not np.isfinite(root.data).all():
        raise NumericError("backward root is not finite")
    produced = any(node.out is root for node in tape.nodes)
    if not produced:
        raise ValueError("root was not produced on this tape (detached or recorded elsewhere)")

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        d_out = adjoint.pop(id(node.out), None)
        if d_out is None:
            continue  # this node does not influence the root
        grads = node.backward_fn(d_out)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            g = np.asarray(g)
            if inp.requires_grad:
                inp.accumulate_grad(g)
            key = id(inp)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
