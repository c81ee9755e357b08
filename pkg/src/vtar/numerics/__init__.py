from vtar.numerics import ops
from vtar.numerics.gradcheck import grad_check
from vtar.numerics.tensor import Graph, Node, Tensor, backward, current_graph, no_grad

__all__ = [
    "Graph",
    "Node",
    "Tensor",
    "backward",
    "current_graph",
    "grad_check",
    "no_grad",
    "ops",
]
