"""Stochastic gradient descent with heavy-ball momentum."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params, state):
    """Apply ``v <- momentum*v + grad; p <- p - lr*v`` then clear gradients.

    ``params`` maps names to parameter tensors.  Every parameter must carry a
    gradient; a missing one raises ``ValueError`` naming it.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"parameter {missing[0]!r} has no gradient" + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    lr = np.asarray(state.learning_rate)
    mu = np.asarray(state.momentum)
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p.data)
        v = (mu * v + p.grad).astype(p.dtype, copy=False)
        state.velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)
        p.grad = None
