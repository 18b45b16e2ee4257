"""Reverse-mode automatic differentiation on numpy arrays.

Float64 throughout. Build graphs with the ops in :mod:`cxrkit.autodiff.ops`,
differentiate with :func:`backward`, verify with :func:`grad_check`.
"""

from .tensor import Tensor, OpRecord, backward, graph_nodes, no_grad, is_grad_enabled
from . import ops
from .ops import forward_op
from .gradcheck import grad_check, grad_check_params

__all__ = [
    "Tensor",
    "OpRecord",
    "backward",
    "graph_nodes",
    "no_grad",
    "is_grad_enabled",
    "ops",
    "forward_op",
    "grad_check",
    "grad_check_params",
]
