"""Trainable parameters and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from .engine import Tensor


class Parameter:
    """Named trainable tensor with first/second-moment optimizer state."""

    def __init__(self, data: np.ndarray, name: str):
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def size(self) -> int:
        return self.tensor.data.size

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.data.shape})"


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def adam_step(
    params: list[Parameter],
    grads: list[np.ndarray] | None = None,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place.

    grads defaults to the gradients accumulated on each parameter's tensor.
    """
    if grads is None:
        grads = [p.tensor.grad for p in params]
    if len(grads) != len(params):
        raise ValueError("one gradient required per parameter")
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.tensor.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name} of shape {p.tensor.data.shape}"
            )
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
