"""External-attention sequence encoder.

The attention function is a small MLP whose weights persist across batches,
so each sequence is encoded independently of the other sequences it is
batched with.
"""

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from src.diffcore import (
    ContractError,
    Tensor,
    concat,
    exp,
    gather_rows,
    leaky_relu,
    matmul,
    mean,
    reshape,
    softmax,
    sum_,
)

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("softmax", "paper-sqrt")


@dataclass
class EaParams:
    """Per-domain attention memory: w1 (d, d), w2 (d, 1), b (d,)."""

    w1: Tensor
    w2: Tensor
    b: Tensor

    def __post_init__(self) -> None:
        d = self.w1.shape[0]
        if self.w1.shape != (d, d) or self.w2.shape != (d, 1) or self.b.shape != (d,):
            raise ContractError(
                f"EaParams shapes w1={self.w1.shape}, w2={self.w2.shape}, b={self.b.shape} "
                f"do not match d={d}"
            )

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.w2": self.w2, f"{prefix}.b": self.b}


def _scores(pairs: Tensor, ea: EaParams, slope: float) -> Tensor:
    """w2^T leaky(w1 x + b) for every row x of ``pairs``; returns (rows, 1)."""
    if pairs.shape[-1] != ea.dim:
        raise ContractError(f"attention input width {pairs.shape[-1]} != memory width {ea.dim}")
    hidden = leaky_relu(matmul(pairs, ea.w1.T) + ea.b, slope)
    return matmul(hidden, ea.w2)


def pair_score(e_i: Tensor, e_j: Tensor, ea: EaParams, slope: float = 0.2) -> Tensor:
    """Attention score of one ordered item pair (symmetric in its arguments)."""
    if e_i.shape != e_j.shape:
        raise ContractError(f"pair_score: shapes {e_i.shape} and {e_j.shape} differ")
    product = reshape(e_i * e_j, (1, ea.dim))
    return reshape(_scores(product, ea, slope), ())


def score_matrix(items: Tensor, ea: EaParams, slope: float = 0.2) -> Tensor:
    """Scores f[i, j] for all ordered pairs of an (L, d) item matrix."""
    length = items.shape[0]
    rows = np.repeat(np.arange(length), length)
    cols = np.tile(np.arange(length), length)
    products = gather_rows(items, rows) * gather_rows(items, cols)
    return reshape(_scores(products, ea, slope), (length, length))


def normalize_scores(f: Tensor, mode: str = "softmax") -> Tensor:
    """
    Turn a score matrix into attention weights, row by row.

    ``softmax`` divides exp(f) by the row sum of exp(f). ``paper-sqrt`` divides
    exp(f) by the row sum of sqrt(exp(f)); its rows do not sum to 1.

    Raises:
        ContractError: On an unknown mode
    """
    if mode == "softmax":
        return softmax(f, axis=1)
    if mode == "paper-sqrt":
        shift = f.data.max(axis=1, keepdims=True)
        numerator = exp(f - shift)
        denominator = sum_(exp((f - shift) * 0.5), axis=1, keepdims=True)
        return numerator / denominator * np.exp(shift / 2.0)
    raise ContractError(f"Unknown attention mode '{mode}', expected one of {ATTENTION_MODES}")


def attention_weights(
    items: Tensor, ea: EaParams, mode: str = "softmax", slope: float = 0.2
) -> Tensor:
    return normalize_scores(score_matrix(items, ea, slope), mode)


def attend_sequence(
    items: Tensor, ea: EaParams, mode: str = "softmax", slope: float = 0.2
) -> Tensor:
    """
    Sequence vector h_S: mean over i of sum_j a[i, j] e_j.

    Args:
        items: Ordered item embeddings of one domain subsequence, (L, d)
        ea: Attention memory of that domain
        mode: ``softmax`` or ``paper-sqrt``
        slope: Negative slope inside the attention MLP

    Returns:
        Sequence representation, (d,)

    Raises:
        ContractError: If the sequence is empty
    """
    if len(items.shape) != 2 or items.shape[0] == 0:
        raise ContractError(f"attend_sequence: need a non-empty (L, d) matrix, got {items.shape}")
    attended = matmul(attention_weights(items, ea, mode, slope), items)
    return mean(attended, axis=0)


def mean_pool(items: Tensor) -> Tensor:
    """Plain average of item embeddings, used when external attention is off."""
    if len(items.shape) != 2 or items.shape[0] == 0:
        raise ContractError(f"mean_pool: need a non-empty (L, d) matrix, got {items.shape}")
    return mean(items, axis=0)


def build_preference(h_s: Tensor, e_u: Tensor) -> Tensor:
    """[h_S ; e_U], items first."""
    if h_s.shape != e_u.shape or len(h_s.shape) != 1:
        raise ContractError(f"build_preference: widths differ, {h_s.shape} vs {e_u.shape}")
    return concat([h_s, e_u], axis=0)
