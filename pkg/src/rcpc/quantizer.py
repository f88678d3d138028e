"""In-loop uniform scalar quantizer with odd step sizes."""

import numpy as np
from numba import njit

from .core import ConfigError


@njit(cache=True, inline="always")
def quantize_scalar(delta, q):
    half = (q - 1) // 2
    if delta >= 0:
        return (delta + half) // q
    return -((-delta + half) // q)


def _check_step(q):
    q = np.asarray(q)
    if np.any(q < 1) or np.any(q % 2 == 0):
        raise ConfigError("quantization steps must be odd and >= 1")


def quantize(delta, q):
    """``sgn(d) * floor((|d| + (q-1)/2) / q)``; works on scalars or arrays."""
    _check_step(q)
    d = np.asarray(delta, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    out = np.sign(d) * ((np.abs(d) + (q - 1) // 2) // q)
    return int(out) if out.ndim == 0 else out


def dequantize(qdelta, q):
    _check_step(q)
    out = np.asarray(qdelta, dtype=np.int64) * np.asarray(q, dtype=np.int64)
    return int(out) if out.ndim == 0 else out


def max_error(q) -> int:
    """Largest reconstruction error a step ``q`` can introduce."""
    _check_step(q)
    return (int(q) - 1) // 2
