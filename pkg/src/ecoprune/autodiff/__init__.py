"""Reverse-mode differentiation over float64 numpy arrays."""
from . import ops
from .functional import finite_difference_gradient, finite_difference_jacobian, vjp_step
from .ops import primitive_set, value_of
from .tape import (METER, ContractError, DimensionError, FloatMeter, GradientMap,
                   NumericError, Tape, Var, backward)

__all__ = [
    "ops", "primitive_set", "value_of", "backward", "vjp_step",
    "finite_difference_gradient", "finite_difference_jacobian", "Tape", "Var",
    "GradientMap", "FloatMeter", "METER", "ContractError", "DimensionError",
    "NumericError",
]
