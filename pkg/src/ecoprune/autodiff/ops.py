"""Differentiable primitives.

Every function takes numpy arrays, Python scalars or :class:`Var` handles.
When no argument is a ``Var`` the result is a plain array and nothing is
recorded. Each backward rule is the exact vector-Jacobian product of its
forward map; the floats a rule keeps alive are reported to the tape so that
``Tape.live_float_count`` reflects retained activations. Constant inputs
(arrays that are not ``Var``) are referenced, not counted.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf, expit

from .tape import ContractError, DimensionError, NumericError, Tape, Var

__all__ = [
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat",
    "split", "take_slice", "softmax", "sigmoid", "log", "exp", "gelu",
    "layer_norm", "sum", "mean", "l1_norm", "l2_norm", "clamp01", "embedding",
    "value_of", "PRIMITIVES",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def value_of(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _idx(x):
    return x.index if isinstance(x, Var) else None


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: operands with shapes {a.shape} and {b.shape} "
                             f"do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("add", av, bv)
    out = _finite(av + bv, "add")
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape.record(out, (_idx(a), _idx(b)),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), 0)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("sub", av, bv)
    out = _finite(av - bv, "sub")
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape.record(out, (_idx(a), _idx(b)),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), 0)


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    av, bv = value_of(a), value_of(b)
    _broadcast_shape("mul", av, bv)
    out = _finite(av * bv, "mul")
    tape = _tape_of(a, b)
    if tape is None:
        return out
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    saved = av.size + bv.size if (a_var and b_var) else 0

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a_var else None
        gb = _unbroadcast(g * av, bv.shape) if b_var else None
        return ga, gb

    return tape.record(out, (_idx(a), _idx(b)), vjp, saved)


def scale(a, c: float):
    """Multiply by a Python scalar constant."""
    av = value_of(a)
    out = _finite(av * c, "scale")
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (_idx(a),), lambda g: (g * c,), 0)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: left operand {av.shape} and right operand "
                             f"{bv.shape} are not conformable")
    out = _finite(av @ bv, "matmul")
    tape = _tape_of(a, b)
    if tape is None:
        return out
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    # grad of a needs b, grad of b needs a; only activations are counted
    saved = av.size + bv.size if (a_var and b_var) else 0

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a_var else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b_var else None
        return ga, gb

    return tape.record(out, (_idx(a), _idx(b)), vjp, saved)


def transpose(a):
    """Swap the last two axes."""
    av = value_of(a)
    if av.ndim < 2:
        raise DimensionError(f"transpose: operand of shape {av.shape} has fewer than 2 axes")
    out = np.swapaxes(av, -1, -2)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (_idx(a),), lambda g: (np.swapaxes(g, -1, -2),), 0)


def reshape(a, shape):
    av = value_of(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {av.shape} as {shape}") from None
    tape = _tape_of(a)
    if tape is None:
        return out
    src = av.shape
    return tape.record(out, (_idx(a),), lambda g: (g.reshape(src),), 0)


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    if not vals:
        raise DimensionError("concat: no operands")
    ref = vals[0]
    ax = axis % ref.ndim
    for v in vals[1:]:
        if v.ndim != ref.ndim or any(v.shape[i] != ref.shape[i]
                                     for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: operand shapes {[x.shape for x in vals]} "
                                 f"disagree off axis {axis}")
    out = np.concatenate(vals, axis=ax)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return tape.record(out, tuple(_idx(x) for x in xs), vjp, 0)


def take_slice(a, start: int, stop: int, axis: int = -1):
    av = value_of(a)
    ax = axis % av.ndim
    if not 0 <= start <= stop <= av.shape[ax]:
        raise DimensionError(f"take_slice: [{start}:{stop}] out of range for axis of "
                             f"length {av.shape[ax]}")
    index = [slice(None)] * av.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = av[index]
    tape = _tape_of(a)
    if tape is None:
        return out
    src = av.shape

    def vjp(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return tape.record(out, (_idx(a),), vjp, 0)


def split(a, sizes: Sequence[int], axis: int = -1) -> list:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    av = value_of(a)
    if builtin_sum(sizes) != av.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not add up to axis length "
                             f"{av.shape[axis]}")
    pieces, start = [], 0
    for n in sizes:
        pieces.append(take_slice(a, start, start + n, axis))
        start += n
    return pieces


# -- nonlinearities ---------------------------------------------------------

def softmax(a):
    """Softmax over the last axis."""
    av = value_of(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return tape.record(out, (_idx(a),), vjp, out.size)


def sigmoid(a):
    av = value_of(a)
    out = expit(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (_idx(a),), lambda g: (g * out * (1.0 - out),), out.size)


def log(a):
    av = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _finite(np.log(av), "log")
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (_idx(a),), lambda g: (g / av,), av.size)


def exp(a):
    av = value_of(a)
    with np.errstate(over="ignore"):
        out = _finite(np.exp(av), "exp")
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (_idx(a),), lambda g: (g * out,), out.size)


def gelu(a):
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    av = value_of(a)
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))
    out = av * cdf
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * av * av)
        return (g * (cdf + av * pdf),)

    return tape.record(out, (_idx(a),), vjp, 2 * av.size)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize over the last axis, then apply elementwise gain and bias."""
    xv, gv, bv = value_of(x), value_of(gain), value_of(bias)
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gv.shape} / bias {bv.shape} do not match "
                             f"feature size {d} of input {xv.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gv + bv
    tape = _tape_of(x, gain, bias)
    if tape is None:
        return out
    x_var, g_var, b_var = (isinstance(v, Var) for v in (x, gain, bias))
    saved = xhat.size + rstd.size

    def vjp(g):
        gx = gg = gb = None
        if x_var:
            gxhat = g * gv
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if g_var:
            gg = _unbroadcast(g * xhat, gv.shape)
        if b_var:
            gb = _unbroadcast(g, bv.shape)
        return gx, gg, gb

    return tape.record(out, (_idx(x), _idx(gain), _idx(bias)), vjp, saved)


def clamp01(a):
    """Clip to [0, 1]; gradient passes where the input lies in the closed interval."""
    av = value_of(a)
    out = np.clip(av, 0.0, 1.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    inside = (av >= 0.0) & (av <= 1.0)
    return tape.record(out, (_idx(a),), lambda g: (np.where(inside, g, 0.0),), inside.size)


# -- reductions -------------------------------------------------------------

builtin_sum = sum


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    tape = _tape_of(a)
    if tape is None:
        return out
    src = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return tape.record(out, (_idx(a),), vjp, 0)


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    count = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l1_norm(a):
    """Sum of absolute values; subgradient sign(x) with sign(0) = 0."""
    av = value_of(a)
    out = np.asarray(np.abs(av).sum(), dtype=np.float64)
    tape = _tape_of(a)
    if tape is None:
        return out
    sgn = np.sign(av)
    return tape.record(out, (_idx(a),), lambda g: (g * sgn,), sgn.size)


def l2_norm(a, axis=None):
    """Euclidean norm over ``axis`` (all axes by default).

    The gradient at a zero vector is taken to be zero.
    """
    av = value_of(a)
    out = np.sqrt((av * av).sum(axis=axis))
    out = np.asarray(out, dtype=np.float64)
    tape = _tape_of(a)
    if tape is None:
        return out
    keep = out if axis is None else np.expand_dims(out, axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(keep > 0.0, av / np.where(keep > 0.0, keep, 1.0), 0.0)

    def vjp(g):
        gk = g if axis is None else np.expand_dims(g, axis)
        return (gk * unit,)

    return tape.record(out, (_idx(a),), vjp, unit.size)


def embedding(table, ids):
    """Row lookup ``table[ids]``; ids are integer constants."""
    tv = value_of(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise DimensionError(f"embedding: ids must be integers, got {ids.dtype}")
    if tv.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {tv.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {tv.shape[0]})")
    out = tv[ids]
    tape = _tape_of(table)
    if tape is None:
        return out

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids, g)
        return (gt,)

    return tape.record(out, (_idx(table),), vjp, 0)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "transpose": transpose, "reshape": reshape, "concat": concat,
    "split": split, "take_slice": take_slice, "softmax": softmax,
    "sigmoid": sigmoid, "log": log, "exp": exp, "gelu": gelu,
    "layer_norm": layer_norm, "sum": sum, "mean": mean, "l1_norm": l1_norm,
    "l2_norm": l2_norm, "clamp01": clamp01, "embedding": embedding,
}


def primitive_set() -> dict:
    """Catalog of the differentiable primitives, name -> function."""
    return dict(PRIMITIVES)
