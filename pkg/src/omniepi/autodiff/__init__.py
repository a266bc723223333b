from . import ops
from .gradcheck import grad_check
from .ops import count_flops
from .tensor import (Parameter, Tensor, as_tensor, backward, get_dtype, no_grad,
                     precision, set_precision)

__all__ = [
    "Parameter", "Tensor", "as_tensor", "backward", "count_flops", "get_dtype",
    "grad_check", "no_grad", "ops", "precision", "set_precision",
]
