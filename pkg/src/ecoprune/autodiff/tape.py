"""Recording tape and node handles for reverse-mode differentiation.

Values are plain ``numpy.float64`` arrays. A :class:`Var` is a handle to a
node on a :class:`Tape`; operations in :mod:`ecoprune.autodiff.ops` record a
node whenever at least one input is a ``Var`` and otherwise run as plain
numpy, which is how graph-free forward passes are expressed.
"""
from __future__ import annotations

import threading
from typing import Callable, Dict, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class ContractError(RuntimeError):
    """A tape or gradient call violated its usage contract."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


class FloatMeter:
    """Process-wide count of floats held for backward by all live tapes.

    Tracks the current total and the peak since the last :meth:`reset_peak`.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def allocate(self, n: int) -> None:
        with self._lock:
            self.current += n
            if self.current > self.peak:
                self.peak = self.current

    def free(self, n: int) -> None:
        with self._lock:
            self.current -= n

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current


METER = FloatMeter()


class _Node:
    __slots__ = ("parents", "vjp", "saved_floats", "name", "shape")

    def __init__(self, parents, vjp, saved_floats, name=None, shape=None):
        self.parents = parents
        self.vjp = vjp
        self.saved_floats = saved_floats
        self.name = name
        self.shape = shape


class Var:
    """Handle to a recorded value on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)


class Tape:
    """Append-only record of primitive applications.

    ``live_float_count`` is the exact number of floats that backward rules
    currently hold. A tape can be differentiated once; afterwards it is
    released and its saved values are dropped.
    """

    def __init__(self, meter: FloatMeter = METER):
        self.nodes: list[_Node] = []
        self.live_float_count = 0
        self.peak_float_count = 0
        self._meter = meter
        self._released = False

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False

    def leaf(self, value, name: Optional[str] = None) -> Var:
        """Register a differentiable input."""
        self._check_open()
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(_Node(None, None, 0, name, arr.shape))
        return Var(arr, self, len(self.nodes) - 1)

    def record(self, value: np.ndarray, parents: Sequence[Optional[int]],
               vjp: Callable, saved_floats: int) -> Var:
        self._check_open()
        self.nodes.append(_Node(tuple(parents), vjp, saved_floats))
        if saved_floats:
            self.live_float_count += saved_floats
            self.peak_float_count = max(self.peak_float_count, self.live_float_count)
            self._meter.allocate(saved_floats)
        return Var(value, self, len(self.nodes) - 1)

    def release(self) -> None:
        """Drop every node and return saved floats to the meter."""
        if self._released:
            return
        self._meter.free(self.live_float_count)
        self.live_float_count = 0
        self.nodes = []
        self._released = True

    def _check_open(self):
        if self._released:
            raise ContractError("tape has already been consumed by a backward pass")

    def propagate(self, output: Var, cotangent) -> Dict[int, np.ndarray]:
        """Push ``cotangent`` from ``output`` back to every leaf.

        Returns a mapping leaf index -> accumulated gradient and releases the
        tape. Nodes are visited in reverse insertion order, which is a
        reverse topological order by construction.
        """
        self._check_open()
        if output.tape is not self:
            raise ContractError("output was not recorded on this tape")
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != output.value.shape:
            raise DimensionError(
                f"cotangent shape {cot.shape} does not match output shape {output.value.shape}")
        grads: Dict[int, np.ndarray] = {output.index: cot}
        leaves: Dict[int, np.ndarray] = {}
        for idx in range(output.index, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                leaves[idx] = g
                continue
            in_grads = node.vjp(g)
            for parent, pg in zip(node.parents, in_grads):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        self.release()
        return leaves


def backward(loss: Var, wrt: Optional[Sequence[Var]] = None) -> "GradientMap":
    """Gradient of a scalar ``loss`` with respect to tape leaves.

    With ``wrt`` given, the result is keyed by position in ``wrt``;
    otherwise by leaf name (unnamed leaves use their node index). Leaves the
    loss does not depend on receive zeros.
    """
    if not isinstance(loss, Var):
        raise ContractError("loss must be a recorded Var")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    tape._check_open()
    if wrt is None:
        named = [(n.name if n.name is not None else i, i, n.shape)
                 for i, n in enumerate(tape.nodes) if n.vjp is None and i <= loss.index]
    else:
        for v in wrt:
            if v.tape is not tape:
                raise ContractError("gradient requested for a Var on a different tape")
        named = [(k, v.index, v.value.shape) for k, v in enumerate(wrt)]
    raw = tape.propagate(loss, np.ones_like(loss.value))
    out = GradientMap()
    for key, idx, shape in named:
        g = raw.get(idx)
        out[key] = np.zeros(shape, dtype=np.float64) if g is None else g
    return out


class GradientMap(dict):
    """Parameter identifier -> accumulated gradient array."""

    def accumulate(self, key, grad: np.ndarray) -> None:
        if key in self:
            self[key] = self[key] + grad
        else:
            self[key] = np.array(grad, dtype=np.float64)
