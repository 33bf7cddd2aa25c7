"""Single-step VJPs and the central-difference oracle."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tape import DimensionError, NumericError, Tape, Var


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> np.ndarray:
    """Dense Jacobian by central differences, shape ``out.shape + x.shape``."""
    x = np.array(x, dtype=np.float64)
    out0 = np.asarray(f(x))
    jac = np.zeros(out0.shape + x.shape)
    flat = x.reshape(-1)
    jflat = jac.reshape(out0.size, flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig - h
        fm = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig
        jflat[:, i] = ((fp - fm) / (2.0 * h)).reshape(-1)
    if not np.isfinite(jac).all():
        raise NumericError("non-finite Jacobian entries")
    return jac


def vjp_step(f: Callable, inputs: Sequence, cotangent, params: Mapping[str, np.ndarray] | None = None):
    """Vector-Jacobian product of one application of ``f``.

    ``f(*inputs, **params)`` is evaluated on a fresh tape with every input
    and parameter as a leaf; ``cotangent`` is pulled back through it and the
    tape is released before returning. Returns ``(input_cotangents,
    param_cotangents)`` where the first is a list aligned with ``inputs`` and
    the second a dict keyed like ``params``.
    """
    params = dict(params or {})
    tape = Tape()
    try:
        in_vars = [tape.leaf(x) for x in inputs]
        p_vars = {k: tape.leaf(v, name=k) for k, v in params.items()}
        out = f(*in_vars, **p_vars)
        if not isinstance(out, Var):
            # output independent of every leaf
            cot = np.asarray(cotangent, dtype=np.float64)
            if cot.shape != np.shape(out):
                raise DimensionError(f"cotangent shape {cot.shape} does not match output "
                                     f"shape {np.shape(out)}")
            return ([np.zeros_like(v.value) for v in in_vars],
                    {k: np.zeros_like(v.value) for k, v in p_vars.items()})
        raw = tape.propagate(out, cotangent)
    finally:
        tape.release()
    in_cots = [raw.get(v.index, np.zeros_like(v.value)) for v in in_vars]
    p_cots = {k: raw.get(v.index, np.zeros_like(v.value)) for k, v in p_vars.items()}
    return in_cots, p_cots
