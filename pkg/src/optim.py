"""Parameter initialization and the Adam optimizer."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from src.diffcore import ContractError, Tensor

logger = logging.getLogger(__name__)


def xavier_bound(shape: Tuple[int, ...]) -> float:
    """Uniform Xavier bound sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[0], shape[1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape: Tuple[int, ...], seed: int, name: str = "") -> Tensor:
    """
    Draw a trainable tensor from the Xavier uniform distribution.

    Args:
        shape: Tensor shape (matrices use (fan_in, fan_out))
        seed: Seed for this tensor's generator
        name: Optional tensor name

    Returns:
        Leaf tensor with requires_grad=True
    """
    bound = xavier_bound(shape)
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Raises:
        ValueError: If lr is not positive
    """
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")

    step = state.step + 1
    new_state = AdamState(step=step)
    for name, tensor in params.items():
        grad = grads[name]
        m = state.m.get(name, np.zeros_like(tensor.data))
        v = state.v.get(name, np.zeros_like(tensor.data))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad**2
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_state


class Adam:
    """Adam optimizer over a fixed set of named tensors."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 0.005,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """
        Initialize optimizer.

        Args:
            params: Named trainable tensors, each registered exactly once
            lr: Learning rate
            beta1: First moment decay
            beta2: Second moment decay
            eps: Denominator floor

        Raises:
            ValueError: If lr is not positive
            ContractError: If a tensor is registered twice
        """
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        seen = set()
        for name, tensor in params.items():
            if id(tensor) in seen:
                raise ContractError(f"Tensor '{name}' is registered with the optimizer twice")
            seen.add(id(tensor))
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self) -> None:
        grads = {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.params.items()
        }
        self.state = adam_step(
            self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Flatten optimizer state for checkpointing."""
        arrays: Dict[str, np.ndarray] = {"step": np.array(self.state.step)}
        for name, value in self.state.m.items():
            arrays[f"m/{name}"] = value
        for name, value in self.state.v.items():
            arrays[f"v/{name}"] = value
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        state = AdamState(step=int(arrays["step"]))
        for key, value in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "m":
                state.m[name] = np.array(value, dtype=np.float64)
            elif kind == "v":
                state.v[name] = np.array(value, dtype=np.float64)
        unknown = (set(state.m) | set(state.v)) - set(self.params)
        if unknown:
            raise ContractError(f"Optimizer state for unknown tensors: {sorted(unknown)}")
        self.state = state
        logger.debug("Restored optimizer state at step %d", state.step)
