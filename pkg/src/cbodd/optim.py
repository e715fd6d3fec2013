"""Adam with decoupled weight decay and an epoch-based step-decay schedule.

Defaults carry the training recipe used throughout: learning rate 1e-2,
weight decay 1e-4, and a learning-rate decay every 5 epochs.  Epoch
boundaries are signalled by the caller via ``end_epoch()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cbodd.errors import ConfigError, StateError
from cbodd.tensor import DiffArray


@dataclass
class OptimState:
    """Adam accumulators plus the step-decay schedule state.

    The decoupled weight decay multiplies parameters directly by
    ``lr * weight_decay`` per update instead of entering the gradient.
    """

    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    step_size: int = 5
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    epoch_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be a positive integer, got {self.step_size}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")


def adam_step(params: dict[str, DiffArray], state: OptimState) -> None:
    """Apply one Adam update to every parameter in ``params``.

    Gradients must have been populated by a backward pass; a missing
    gradient is a state error.  The step counter increases by exactly 1.
    """
    for name, param in params.items():
        if param.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
        if param.grad.shape != param.values.shape:
            raise StateError(
                f"gradient shape {param.grad.shape} does not match parameter "
                f"{name!r} shape {param.values.shape}"
            )
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, param in params.items():
        grad = param.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.values)
            v = np.zeros_like(param.values)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * param.values
        param.values = param.values - state.learning_rate * update


class Adam:
    """Convenience wrapper owning an :class:`OptimState` for a parameter set."""

    def __init__(self, params: dict[str, DiffArray], **kwargs):
        self.params = params
        self.state = OptimState(**kwargs)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)

    def end_epoch(self) -> None:
        """Signal an epoch boundary; decays the learning rate on schedule."""
        self.state.epoch_count += 1
        if self.state.epoch_count % self.state.step_size == 0:
            self.state.learning_rate *= self.state.decay_factor
