from typing import Iterable

import numpy as np

from core.errors import NonFiniteError, ShapeMismatchError
from core.nn.tensor import Param


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """
    One bias-corrected Adam update on every parameter holding a gradient.
    All gradients are checked before any parameter moves.
    """
    params = [p for p in params if p.grad is not None]
    for p in params:
        if p.grad.shape != p.shape:
            raise ShapeMismatchError(f"gradient of {p.name} has shape {p.grad.shape}, parameter is {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name}")

    for p in params:
        g = p.grad
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.data = (p.data - update).astype(p.data.dtype)


def step_lr(base_lr: float, epoch: int, step_epochs: int = 10, gamma: float = 0.1) -> float:
    """Learning rate for a zero-based epoch: multiplied by `gamma` every `step_epochs` epochs."""
    return base_lr * gamma ** (epoch // step_epochs)


class Adam:
    def __init__(self, params: Iterable[Param], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)
