"""Dense float32 tensors with reverse-mode differentiation."""

from . import ops
from .checkpoint import CheckpointError, dumps, load, loads, save
from .optim import NonFiniteGradient, OptimizerState, adam_step, glorot_init
from .tensor import Graph, Node, Tensor, active_graph, backward

__all__ = [
    "CheckpointError", "Graph", "Node", "NonFiniteGradient", "OptimizerState", "Tensor",
    "active_graph", "adam_step", "backward", "dumps", "glorot_init", "load", "loads",
    "ops", "save",
]
