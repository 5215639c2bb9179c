from __future__ import annotations

from typing import Callable

import numpy as np


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


def minibatch_descent(
    grad_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    n: int,
    *,
    batch_size: int,
    epochs: int,
    learning_rate: float,
    rng: np.random.Generator,
    decay: float = 0.0,
    epoch_end: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Plain minibatch gradient descent with a fresh shuffle each epoch.

    ``grad_fn(theta, idx)`` returns the (loss, gradient) of the batch ``idx``,
    already scaled to a per-sample average. The step size at epoch ``e`` is
    ``learning_rate / (1 + decay * e)``.
    """
    theta = np.array(theta, dtype=np.float64)
    batch_size = max(1, min(batch_size, n))
    for epoch in range(epochs):
        lr = learning_rate / (1.0 + decay * epoch)
        order = rng.permutation(n)
        for b, s in enumerate(range(0, n, batch_size)):
            try:
                loss, grad = grad_fn(theta, order[s : s + batch_size])
            except DivergenceError:
                loss, grad = np.inf, theta
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}; try a smaller learning rate"
                )
            theta -= lr * grad
        if epoch_end is not None:
            epoch_end(epoch, theta)
    return theta
