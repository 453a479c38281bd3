"""InfoNCE contrastive loss between two augmented views."""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from src.diffcore import ContractError, Tensor, log_softmax, matmul, pick, sqrt, sum_
from src.gnn_encoder import NodeReps

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class ContrastiveBatch:
    """Paired item representations of the two views, per domain."""

    z1_a: Tensor
    z2_a: Tensor
    z1_b: Tensor
    z2_b: Tensor
    tau: float

    def __post_init__(self) -> None:
        if self.z1_a.shape != self.z2_a.shape or self.z1_b.shape != self.z2_b.shape:
            raise ContractError(
                f"Paired views differ in shape: A {self.z1_a.shape} vs {self.z2_a.shape}, "
                f"B {self.z1_b.shape} vs {self.z2_b.shape}"
            )
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")

    @classmethod
    def from_views(cls, view1: NodeReps, view2: NodeReps, tau: float) -> "ContrastiveBatch":
        return cls(view1.e_a, view2.e_a, view1.e_b, view2.e_b, tau)


@dataclass
class SslLosses:
    """Per-domain contrastive losses; empty domains contribute zero."""

    loss_a: Tensor
    loss_b: Tensor
    empty_domains: List[str] = field(default_factory=list)


def _row_normalize(z: Tensor) -> Tensor:
    sumsq = sum_(z * z, axis=1, keepdims=True)
    if np.any(sumsq.data == 0.0):
        logger.warning("Zero-norm row in contrastive input; adding eps=%g to norms", NORM_EPS)
        return z / sqrt(sumsq + NORM_EPS**2)
    return z / sqrt(sumsq)


def info_nce(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """
    Summed InfoNCE over rows: row o of z1 and z2 is a positive pair, every
    other row of z2 is a negative for it.

    Args:
        z1: First view representations, (N, d)
        z2: Second view representations, (N, d)
        tau: Softmax temperature

    Returns:
        Scalar loss

    Raises:
        ContractError: On shape mismatch, no rows, or tau <= 0
    """
    if tau <= 0:
        raise ContractError(f"info_nce: tau must be positive, got {tau}")
    if z1.shape != z2.shape or len(z1.shape) != 2:
        raise ContractError(
            f"info_nce: views must share a 2-D shape, got {z1.shape} and {z2.shape}"
        )
    if z1.shape[0] == 0:
        raise ContractError("info_nce: at least one row is required")

    similarity = matmul(_row_normalize(z1), _row_normalize(z2).T) / tau
    positives = pick(log_softmax(similarity, axis=1), np.arange(z1.shape[0]))
    return -sum_(positives)


def ssl_losses(view1: NodeReps, view2: NodeReps, tau: float, ssl_reg: float = 1.0) -> SslLosses:
    """
    Apply InfoNCE to the A-item rows and the B-item rows of two view encodings.

    Both losses are scaled by ``ssl_reg``. A domain with no item nodes in the
    batch yields 0 and is listed in ``empty_domains``.
    """
    batch = ContrastiveBatch.from_views(view1, view2, tau)
    empty: List[str] = []
    losses = {}
    for domain, z1, z2 in (("A", batch.z1_a, batch.z2_a), ("B", batch.z1_b, batch.z2_b)):
        if z1.shape[0] == 0:
            empty.append(domain)
            losses[domain] = Tensor(0.0)
        else:
            losses[domain] = info_nce(z1, z2, tau) * ssl_reg
    if empty:
        logger.debug("No item nodes for contrastive loss in domains %s", empty)
    return SslLosses(loss_a=losses["A"], loss_b=losses["B"], empty_domains=empty)
