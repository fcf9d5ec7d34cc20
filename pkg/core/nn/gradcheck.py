from typing import Callable, Sequence

import numpy as np

from core.nn.tensor import Tensor, no_grad


def max_gradient_error(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float,
                       samples: int = 25, seed: int = 0) -> float:
    """
    Worst relative error between backprop gradients and central differences.

    `fn` rebuilds a scalar from `leaves` on every call. Analytic gradients use the leaves'
    own dtype; the difference quotients evaluate every leaf promoted to float64, checking at
    most `samples` random entries per leaf. Relative error is |a - n| / max(|a| + |n|, 1e-2).
    """
    for leaf in leaves:
        leaf.zero_grad()
    fn().backward()
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.astype(np.float64) for leaf in leaves]

    originals = [leaf.data for leaf in leaves]
    promoted = [data.astype(np.float64) for data in originals]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        try:
            for leaf, base, grad in zip(leaves, promoted, analytic):
                for other, data in zip(leaves, promoted):
                    other.data = data
                count = min(samples, base.size)
                for idx in rng.choice(base.size, size=count, replace=False):
                    bumped = base.copy()
                    leaf.data = bumped
                    bumped.flat[idx] += h
                    f_plus = float(fn().data)
                    bumped.flat[idx] -= 2 * h
                    f_minus = float(fn().data)
                    numeric = (f_plus - f_minus) / (2 * h)
                    a = float(grad.flat[idx])
                    worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-2))
                leaf.data = base
        finally:
            for leaf, data in zip(leaves, originals):
                leaf.data = data
    return worst
