"""Dual-domain prediction heads and the joint training objective."""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np

from src.dataio import Domain
from src.diffcore import (
    ContractError,
    Operand,
    Tensor,
    as_tensor,
    clamp_min,
    concat,
    log,
    matmul,
    mean,
    pick,
    reshape,
    softmax,
    sum_,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class PredictionHead:
    """Linear head of one domain: w (num_items, 4d), b (num_items,)."""

    w: Tensor
    b: Tensor

    def __post_init__(self) -> None:
        if len(self.w.shape) != 2 or self.b.shape != (self.w.shape[0],):
            raise ContractError(f"PredictionHead shapes w={self.w.shape}, b={self.b.shape}")

    @property
    def num_items(self) -> int:
        return self.w.shape[0]

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def predict(
    h_a: Tensor, h_b: Tensor, head: PredictionHead, domain: Union[Domain, str]
) -> Tensor:
    """
    Next-item probabilities over the whole vocabulary of ``domain``.

    The target domain's preference comes first in the concatenated input.
    Accepts single preferences (2d,) or stacked rows (B, 2d).

    Raises:
        ContractError: If preference widths do not match the head
    """
    domain = Domain(domain)
    if h_a.shape != h_b.shape:
        raise ContractError(f"predict: preference shapes differ, {h_a.shape} vs {h_b.shape}")
    single = len(h_a.shape) == 1
    if single:
        h_a = reshape(h_a, (1, h_a.shape[0]))
        h_b = reshape(h_b, (1, h_b.shape[0]))
    if 2 * h_a.shape[1] != head.w.shape[1]:
        raise ContractError(
            f"predict: joint preference width {2 * h_a.shape[1]} != head width {head.w.shape[1]}"
        )

    ordered = [h_a, h_b] if domain == Domain.A else [h_b, h_a]
    logits = matmul(concat(ordered, axis=1), head.w.T) + head.b
    probs = softmax(logits, axis=1)
    return reshape(probs, (head.num_items,)) if single else probs


def ce_loss(probs: Tensor, targets: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Mean cross-entropy -log p[target] over the rows of ``probs``.

    Probabilities below 1e-12 are clamped before the log and a warning is logged.

    Raises:
        ContractError: If there are no rows or targets do not match rows
        IndexError: If a target is outside the vocabulary
    """
    if len(probs.shape) == 1:
        probs = reshape(probs, (1, probs.shape[0]))
    columns = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if probs.shape[0] == 0:
        raise ContractError("ce_loss: empty batch")
    chosen = pick(probs, columns)
    if np.any(chosen.data < PROB_FLOOR):
        clamped = int(np.sum(chosen.data < PROB_FLOOR))
        logger.warning("Clamped %d target probabilities to %g", clamped, PROB_FLOOR)
    return -mean(log(clamp_min(chosen, PROB_FLOOR)))


def joint_loss(
    loss_a: Operand, loss_b: Operand, ssl_a: Operand, ssl_b: Operand, beta: float
) -> Tensor:
    """
    (L_A + beta * L_sA) + (L_B + beta * L_sB).

    Raises:
        ValueError: If beta is negative
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    domain_a = as_tensor(loss_a) + as_tensor(ssl_a) * beta
    domain_b = as_tensor(loss_b) + as_tensor(ssl_b) * beta
    return domain_a + domain_b


def l2_penalty(tensors: Sequence[Tensor], weight: float, batch_size: int) -> Tensor:
    """
    weight / 2 * squared Frobenius norm of ``tensors``, divided by the batch size.

    Raises:
        ValueError: If weight is negative
        ContractError: If batch_size < 1
    """
    if weight < 0:
        raise ValueError(f"l2 weight must be non-negative, got {weight}")
    if batch_size < 1:
        raise ContractError(f"l2_penalty: batch size must be positive, got {batch_size}")
    total = Tensor(0.0)
    for tensor in tensors:
        total = total + sum_(tensor * tensor)
    return total * (0.5 * weight / batch_size)
