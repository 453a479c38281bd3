"""NGCF-style message passing over CDS graphs."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from src.cdsgraph import AugmentedView, CdsGraph
from src.diffcore import (
    ContractError,
    Tensor,
    dropout,
    gather_rows,
    leaky_relu,
    matmul,
    sparse_matmul,
)

logger = logging.getLogger(__name__)

LayerWeights = Tuple[Tensor, Tensor]


@dataclass
class NodeReps:
    """Final node representations split by node class, plus the per-layer stack."""

    e_a: Tensor
    e_u: Tensor
    e_b: Tensor
    layers: List[Tensor]
    final: Tensor


def _activate(x: Tensor, activation: str, slope: float) -> Tensor:
    if activation == "leaky_relu":
        return leaky_relu(x, slope)
    if activation == "identity":
        return x
    raise ContractError(f"Unknown activation '{activation}'")


def propagate_layer(
    e_prev: Tensor,
    m: sp.spmatrix,
    w1: Tensor,
    w2: Tensor,
    activation: str = "leaky_relu",
    slope: float = 0.2,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    One propagation layer: act((M + I) e W1 + (M e) * e W2).

    Args:
        e_prev: Node representations of the previous layer, (N, d)
        m: Normalized adjacency, (N, N)
        w1: Aggregation weights, (d, d)
        w2: Interaction weights, (d, d)
        activation: ``leaky_relu`` or ``identity``
        slope: Negative slope of the leaky ReLU
        dropout_rate: Output dropout rate in training mode
        train: Whether dropout is active
        rng: Generator for the dropout mask

    Returns:
        Layer output, (N, d)

    Raises:
        ContractError: If shapes do not line up
    """
    if len(e_prev.shape) != 2:
        raise ContractError(f"propagate_layer: embeddings must be 2-D, got {e_prev.shape}")
    n, d = e_prev.shape
    if m.shape != (n, n):
        raise ContractError(f"propagate_layer: adjacency {m.shape} does not match {e_prev.shape}")
    for name, w in (("w1", w1), ("w2", w2)):
        if w.shape != (d, d):
            raise ContractError(f"propagate_layer: {name} has shape {w.shape}, expected {(d, d)}")

    side = sparse_matmul(m, e_prev)
    out = matmul(side + e_prev, w1) + matmul(side * e_prev, w2)
    out = _activate(out, activation, slope)
    return dropout(out, dropout_rate, train, rng)


def readout(stack: Sequence[Tensor], block_sizes: Tuple[int, int, int]) -> NodeReps:
    """
    Average layers 1..s and split the rows into A items, users and B items.

    Raises:
        ContractError: If the stack is empty or rows do not match block sizes
    """
    if not stack:
        raise ContractError("readout: empty layer stack")
    m_b, p_b, n_b = block_sizes
    if stack[0].shape[0] != m_b + p_b + n_b:
        raise ContractError(
            f"readout: {stack[0].shape[0]} rows do not match blocks {block_sizes}"
        )
    final = stack[0]
    for layer in stack[1:]:
        final = final + layer
    if len(stack) > 1:
        final = final / float(len(stack))
    return NodeReps(
        e_a=gather_rows(final, np.arange(0, m_b)),
        e_u=gather_rows(final, np.arange(m_b, m_b + p_b)),
        e_b=gather_rows(final, np.arange(m_b + p_b, m_b + p_b + n_b)),
        layers=list(stack),
        final=final,
    )


def encode(
    graph: Union[CdsGraph, AugmentedView],
    embedding: Tensor,
    weights: Sequence[LayerWeights],
    num_items_a: int,
    num_users: int,
    train: bool = False,
    dropout_rate: float = 0.0,
    activation: str = "leaky_relu",
    slope: float = 0.2,
    rng: Optional[np.random.Generator] = None,
) -> NodeReps:
    """
    Encode the batch nodes of a graph or of one of its augmented views.

    Layer-0 rows are gathered from the global embedding table, which stores
    A items, then users, then B items.

    Raises:
        ContractError: If no layer weights are given
        IndexError: If a node falls outside the embedding table
    """
    if not weights:
        raise ContractError("encode: at least one layer is required")
    if isinstance(graph, AugmentedView):
        base, matrix = graph.graph, graph.matrix
    else:
        base, matrix = graph, graph.matrix

    e = gather_rows(embedding, base.global_rows(num_items_a, num_users))
    stack: List[Tensor] = []
    for w1, w2 in weights:
        e = propagate_layer(e, matrix, w1, w2, activation, slope, dropout_rate, train, rng)
        stack.append(e)
    return readout(stack, base.block_sizes)
