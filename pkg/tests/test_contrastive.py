"""Tests for the InfoNCE contrastive loss."""
import logging
import math

import numpy as np
import pytest

from src.contrastive import ContrastiveBatch, info_nce, ssl_losses
from src.diffcore import ContractError, Tensor, grad_check
from src.gnn_encoder import NodeReps


def _double_loop(z1: np.ndarray, z2: np.ndarray, tau: float) -> float:
    total = 0.0
    for o in range(z1.shape[0]):
        u = z1[o] / np.linalg.norm(z1[o])
        denominator = 0.0
        positive = 0.0
        for j in range(z2.shape[0]):
            v = z2[j] / np.linalg.norm(z2[j])
            term = math.exp(float(u @ v) / tau)
            denominator += term
            if j == o:
                positive = term
        total -= math.log(positive / denominator)
    return total


def _reps(e_a: np.ndarray, e_b: np.ndarray) -> NodeReps:
    a, b = Tensor(e_a), Tensor(e_b)
    final = Tensor(np.vstack([e_a, e_b]))
    users = Tensor(np.zeros((0, e_a.shape[1])))
    return NodeReps(e_a=a, e_u=users, e_b=b, layers=[final], final=final)


class TestInfoNce:
    """Test info_nce function."""

    def test_orthonormal_rows(self) -> None:
        """Test two orthonormal rows at tau 1 sum to 2 * log(1 + 1/e)."""
        z = Tensor(np.eye(2))
        loss = info_nce(z, z, tau=1.0)
        assert loss.item() == pytest.approx(0.6265, abs=1e-4)
        assert loss.item() == pytest.approx(2.0 * -math.log(math.e / (math.e + 1.0)), abs=1e-6)

    def test_single_row_is_zero(self) -> None:
        """Test one row has no negatives and zero loss."""
        z = Tensor(np.array([[0.3, -0.4]]))
        assert info_nce(z, z, tau=0.2).item() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("n", [1, 5, 32])
    def test_matches_double_loop(self, n: int) -> None:
        """Test the vectorized loss equals the O(N^2) loop."""
        rng = np.random.default_rng(n)
        z1 = rng.normal(size=(n, 4))
        z2 = rng.normal(size=(n, 4))
        loss = info_nce(Tensor(z1), Tensor(z2), tau=0.5).item()
        assert loss == pytest.approx(_double_loop(z1, z2, 0.5), abs=1e-10)

    def test_scale_invariant(self) -> None:
        """Test rescaling rows leaves the loss unchanged."""
        rng = np.random.default_rng(0)
        z1 = rng.normal(size=(6, 3))
        z2 = rng.normal(size=(6, 3))
        scale = rng.uniform(0.1, 10.0, size=(6, 1))
        base = info_nce(Tensor(z1), Tensor(z2), 0.2).item()
        scaled = info_nce(Tensor(z1 * scale), Tensor(z2 * 3.0), 0.2).item()
        assert scaled == pytest.approx(base, abs=1e-10)

    def test_high_temperature_is_uniform(self) -> None:
        """Test a huge tau gives log N per row."""
        rng = np.random.default_rng(2)
        z1 = Tensor(rng.normal(size=(8, 3)))
        z2 = Tensor(rng.normal(size=(8, 3)))
        assert info_nce(z1, z2, tau=1e6).item() == pytest.approx(8 * math.log(8), rel=1e-5)

    def test_zero_row_warns(self, caplog: pytest.LogCaptureFixture) -> None:
        """Test a zero-norm row is stabilized with a warning."""
        z1 = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
        z2 = Tensor(np.eye(2))
        with caplog.at_level(logging.WARNING, logger="src.contrastive"):
            loss = info_nce(z1, z2, tau=1.0)
        assert math.isfinite(loss.item())
        assert "Zero-norm row" in caplog.text

    def test_gradients(self) -> None:
        """Test gradients through normalization match finite differences."""
        rng = np.random.default_rng(7)
        z1 = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="z1")
        z2 = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="z2")
        report = grad_check(lambda: info_nce(z1, z2, 0.3), {"z1": z1, "z2": z2})
        assert report.passed, report.to_dict()

    def test_row_permutation_invariant(self) -> None:
        """Test permuting both views' rows together leaves the loss unchanged."""
        rng = np.random.default_rng(9)
        z1 = rng.normal(size=(7, 4))
        z2 = rng.normal(size=(7, 4))
        perm = rng.permutation(7)
        base = info_nce(Tensor(z1), Tensor(z2), 0.3).item()
        permuted = info_nce(Tensor(z1[perm]), Tensor(z2[perm]), 0.3).item()
        assert permuted == pytest.approx(base, abs=1e-10)

    @pytest.mark.parametrize("theta", [0.3, 0.8, 1.2, 2.0])
    def test_decreases_as_positive_aligns(self, theta: float) -> None:
        """Test the loss falls strictly as a positive pair's cosine rises."""
        rng = np.random.default_rng(3)
        z1 = np.eye(4, 5)
        others = np.eye(4, 5)[1:] + 0.3 * rng.normal(size=(3, 5))

        def loss_at(angle: float) -> float:
            first = np.array([[math.cos(angle), 0.0, 0.0, 0.0, math.sin(angle)]])
            return info_nce(Tensor(z1), Tensor(np.vstack([first, others])), 0.5).item()

        step = 0.05
        assert loss_at(theta - step) < loss_at(theta) < loss_at(theta + step)

    def test_invalid_tau(self) -> None:
        """Test error for non-positive tau."""
        z = Tensor(np.eye(2))
        with pytest.raises(ContractError, match="tau"):
            info_nce(z, z, tau=0.0)

    def test_shape_mismatch(self) -> None:
        """Test error for views of different shapes."""
        with pytest.raises(ContractError, match="share a 2-D shape"):
            info_nce(Tensor(np.eye(2)), Tensor(np.eye(3)), tau=1.0)

    def test_no_rows(self) -> None:
        """Test error for empty views."""
        z = Tensor(np.zeros((0, 2)))
        with pytest.raises(ContractError, match="at least one row"):
            info_nce(z, z, tau=1.0)


class TestSslLosses:
    """Test ssl_losses function."""

    def test_per_domain_losses_scaled(self) -> None:
        """Test both domains are scored and multiplied by ssl_reg."""
        reps = _reps(np.eye(2), np.eye(2))
        losses = ssl_losses(reps, reps, tau=1.0, ssl_reg=0.5)
        assert losses.loss_a.item() == pytest.approx(0.5 * 0.626523, abs=1e-5)
        assert losses.loss_b.item() == pytest.approx(0.5 * 0.626523, abs=1e-5)
        assert losses.empty_domains == []

    def test_empty_domain_is_zero(self) -> None:
        """Test a domain without item nodes contributes zero."""
        reps = _reps(np.eye(2), np.zeros((0, 2)))
        losses = ssl_losses(reps, reps, tau=1.0)
        assert losses.loss_b.item() == 0.0
        assert losses.empty_domains == ["B"]

    def test_batch_shape_validation(self) -> None:
        """Test paired views must match in shape."""
        with pytest.raises(ContractError, match="Paired views differ"):
            ContrastiveBatch(
                Tensor(np.eye(2)), Tensor(np.eye(3)), Tensor(np.eye(2)), Tensor(np.eye(2)), 1.0
            )
