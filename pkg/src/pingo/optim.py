"""Adam with bias correction and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """Update ``params`` in place and zero their gradients.

    The moment buffers are created lazily on the first call so that
    ``state.m``/``state.v`` always line up with ``params``.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            label = f" ({p.name})" if p.name else ""
            raise MissingGradientError(f"adam_step: parameter {i}{label} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(
            f"adam_step: optimizer state tracks {len(state.m)} parameters, got {len(params)}"
        )

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad.fill(0.0)
