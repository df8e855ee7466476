"""Dense tensors, learnable parameters and precision handling."""
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from spikeflow.errors import ConfigError

PRECISIONS = {
    '32': np.float32,
    'float32': np.float32,
    '64': np.float64,
    'float64': np.float64,
}


def resolve_dtype(precision) -> np.dtype:
    """Map a precision setting ('32', 'float64', a numpy dtype, ...) to a float dtype."""
    if isinstance(precision, str):
        if precision not in PRECISIONS:
            raise ConfigError(f"unknown precision '{precision}', expected 32 or 64")
        return np.dtype(PRECISIONS[precision])
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported precision {dtype}")
    return dtype


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Contiguous array copy with the requested dtype."""
    return np.array(data, dtype=dtype, copy=True, order='C')


@dataclass
class Parameter:
    """A learnable value with an additively accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, order='C')
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, grad):
        """Add a gradient contribution."""
        self.grad += grad

    def zero_grad(self):
        """Reset the gradient to zero."""
        self.grad[...] = 0

    def astype(self, dtype) -> 'Parameter':
        """Copy of this parameter at another precision."""
        return Parameter(self.value.astype(dtype), self.grad.astype(dtype))


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], dtype) -> np.ndarray:
    """Uniform weights in +-sqrt(6 / fan_in), fan_in = product of all but the first dim."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
