"""Reverse-mode differentiation over numpy arrays, parameters and Adam."""
from . import tape as ops
from .gradcheck import grad, grad_check, numeric_grad
from .params import ParamStore, adam_step
from .tape import Tape, Tensor, as_tensor, value

__all__ = ["ops", "grad", "grad_check", "numeric_grad", "ParamStore", "adam_step",
           "Tape", "Tensor", "as_tensor", "value"]
