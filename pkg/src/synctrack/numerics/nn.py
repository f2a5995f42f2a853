"""Small parameterized layers built on the differentiation engine.

Layers own their Parameters under hierarchical dotted names so that weight
files and parameter counts are stable across runs.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Tensor
from .optim import Parameter


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base holding parameters in registration order."""

    def __init__(self):
        self._params: list[Parameter] = []

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def _register(self, data: np.ndarray, name: str) -> Parameter:
        p = Parameter(data, name)
        self._params.append(p)
        return p


class Linear(Layer):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str,
                 dtype=np.float64):
        super().__init__()
        self.weight = self._register(
            _uniform(rng, (c_in, c_out), c_in, dtype), f"{name}.weight"
        )
        self.bias = self._register(
            _uniform(rng, (c_out,), c_in, dtype), f"{name}.bias"
        )

    def __call__(self, x: Tensor) -> Tensor:
        return engine.linear(x, self.weight.tensor, self.bias.tensor)


class LayerNorm(Layer):
    def __init__(self, c: int, name: str, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self._register(np.ones(c, dtype=dtype), f"{name}.gain")
        self.bias = self._register(np.zeros(c, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return engine.layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


class BatchNorm(Layer):
    """Channel-first batch normalization with running statistics."""

    def __init__(self, c: int, name: str, dtype=np.float64, momentum: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gain = self._register(np.ones(c, dtype=dtype), f"{name}.gain")
        self.bias = self._register(np.zeros(c, dtype=dtype), f"{name}.bias")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return engine.batch_norm(
            x,
            self.gain.tensor,
            self.bias.tensor,
            self.running_mean,
            self.running_var,
            training,
            self.momentum,
            self.eps,
        )


class Conv(Layer):
    """Kernel-3, padding-1 convolution over 2 or 3 spatial axes."""

    def __init__(self, c_in: int, c_out: int, stride, rng: np.random.Generator,
                 name: str, dtype=np.float64):
        super().__init__()
        self.stride = tuple(int(s) for s in stride)
        nd = len(self.stride)
        fan_in = c_in * 3**nd
        self.weight = self._register(
            _uniform(rng, (c_out, c_in) + (3,) * nd, fan_in, dtype), f"{name}.weight"
        )
        self.bias = self._register(
            _uniform(rng, (c_out,), fan_in, dtype), f"{name}.bias"
        )

    def __call__(self, x: Tensor) -> Tensor:
        return engine.conv_nd(x, self.weight.tensor, self.bias.tensor, self.stride)


class ConvTranspose2d(Layer):
    """Stride-2 transposed convolution doubling both spatial axes."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str,
                 dtype=np.float64):
        super().__init__()
        self.weight = self._register(
            _uniform(rng, (c_in, c_out, 3, 3), c_in * 9, dtype), f"{name}.weight"
        )
        self.bias = self._register(
            _uniform(rng, (c_out,), c_in * 9, dtype), f"{name}.bias"
        )

    def __call__(self, x: Tensor) -> Tensor:
        return engine.conv_transpose2d(x, self.weight.tensor, self.bias.tensor)
