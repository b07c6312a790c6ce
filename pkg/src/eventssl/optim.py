"""Plain SGD with momentum over named parameter tables."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .nn import ParamSet


class TrainingDiverged(RuntimeError):
    """Raised when a training loss stops being finite."""


class MomentumSGD:
    """v = momentum * v + g; p = p - lr * v. Velocity is keyed by parameter
    name, so it survives the new Tensor objects created by each update."""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[Tensor, np.ndarray]) -> ParamSet:
        updated: dict[str, Tensor] = {}
        for name, tensor in params.tensors.items():
            g = grads.get(tensor)
            if g is None:
                updated[name] = tensor
                continue
            vel = self._velocity.get(name)
            vel = g.copy() if vel is None else self.momentum * vel + g
            self._velocity[name] = vel
            updated[name] = Tensor(
                (tensor.data - self.learning_rate * vel).astype(tensor.dtype),
                requires_grad=True,
            )
        return ParamSet(config=params.config, tensors=updated)
