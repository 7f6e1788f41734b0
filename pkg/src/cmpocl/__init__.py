"""Replay-free online continual self-supervised learning with multiple patches."""

from .losses import CmpHyperParams, PatchEmbeddings
from .tensor import ContractError, Graph, Node, NumericError, backward, grad_check

__all__ = [
    "CmpHyperParams",
    "ContractError",
    "Graph",
    "Node",
    "NumericError",
    "PatchEmbeddings",
    "backward",
    "grad_check",
]
