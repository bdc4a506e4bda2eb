"""Adam parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update.

    Returns the new parameter arrays; ``state`` is updated in place (moments
    are allocated lazily on the first call) and also returned.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError(
            f"adam_step: state tracks {len(state.first_moment)} parameters, got {len(params)}"
        )

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.first_moment[i], state.second_moment[i]
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(
                f"adam_step: parameter {i} has shape {p.shape}, gradient {g.shape}, moment {m.shape}"
            )
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[i] = m
        state.second_moment[i] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updated.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return updated, state


class Adam:
    """Applies :func:`adam_step` to a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, _ = adam_step([p.data for p in self.params], grads, self.state)
        for p, data in zip(self.params, new):
            p.data = data
