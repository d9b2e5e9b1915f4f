"""Reverse-mode automatic differentiation over dense numeric tensors.

The primitive registry lives in :mod:`.graph`, evaluation and gradients in
:mod:`.engine`, and the convolution gather/scatter kernels (compiled
extension with a pure-numpy fallback) in :mod:`.kernels`.
"""

from . import graph
from .engine import (
    NonFiniteError,
    UnboundInputError,
    evaluate,
    gradient,
    gradient_as_nodes,
    topo_order,
)
from .graph import GraphError, Node, SecondOrderUnsupportedError, constant, placeholder
from .kernels import backend_name, has_compiled_backend

__all__ = [
    "graph",
    "Node",
    "placeholder",
    "constant",
    "evaluate",
    "gradient",
    "gradient_as_nodes",
    "topo_order",
    "backend_name",
    "has_compiled_backend",
    "GraphError",
    "NonFiniteError",
    "UnboundInputError",
    "SecondOrderUnsupportedError",
]
