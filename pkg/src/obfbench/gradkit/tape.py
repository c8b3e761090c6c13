"""Tensor values and the recording tape."""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(ArithmeticError):
    """A NaN or Inf showed up where a finite value was required."""


class Tensor:
    """An immutable dense array, optionally tracked by a :class:`Tape`.

    ``node`` is the index of the op that produced the tensor on its tape,
    or ``None`` for constants.
    """

    __slots__ = ("data", "tape", "node", "trainable")

    def __init__(self, data, tape=None, node=None, trainable=False):
        self.data = data
        self.tape = tape
        self.node = node
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = " tracked" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Gradients(dict):
    """Maps leaf tensors to gradient arrays (keyed by object identity)."""

    def __getitem__(self, leaf):
        return dict.__getitem__(self, id(leaf))

    def __contains__(self, leaf):
        return dict.__contains__(self, id(leaf))


class Tape:
    """Append-only list of recorded ops.

    Ops applied to tensors created through :meth:`leaf` (or derived from
    them) are recorded here; everything else runs untracked. Leaves occupy a
    node slot too, so the list stays in topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    def leaf(self, data, trainable: bool = True, dtype=None) -> Tensor:
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        t = Tensor(arr, self, len(self.nodes), trainable)
        self.nodes.append(_Node("leaf", (), None))
        self.leaves.append(t)
        return t

    def record(self, op: str, value: np.ndarray, inputs, backward) -> Tensor:
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(_Node(op, tuple(inputs), backward))
        return t

    def backward(self, output: Tensor) -> Gradients:
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.data.ndim != 0 and output.data.size != 1:
            raise ValueError("backward needs a scalar output")
        if not np.isfinite(output.data).all():
            raise NonFiniteError("non-finite gradient")
        grads: list = [None] * (output.node + 1)
        grads[output.node] = np.ones_like(output.data)
        for idx in range(output.node, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward is None:
                continue
            grads[idx] = None
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or inp.tape is not self:
                    continue
                j = inp.node
                if grads[j] is None:
                    grads[j] = ig
                else:
                    grads[j] = grads[j] + ig
        out = Gradients()
        for leaf in self.leaves:
            if not leaf.trainable:
                continue
            g = grads[leaf.node] if leaf.node < len(grads) else None
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
                if not np.isfinite(g).all():
                    raise NonFiniteError("non-finite gradient")
            dict.__setitem__(out, id(leaf), g)
        return out


def tracking_tape(*tensors):
    """Return the tape shared by any tracked input, or ``None``."""
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = t.tape
    return tape
