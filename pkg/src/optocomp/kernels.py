"""Numerical primitives: matrix-vector products, real FFT magnitude, activations.

Everything works on float64 numpy arrays. The activation functions accept
either plain arrays or autodiff variables (see :mod:`optocomp.autodiff`); the
array form is defined here and the differentiable form reuses it.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractError

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715


def matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ContractError(f"matvec shape mismatch: W{W.shape} x{x.shape}")
    return W @ x


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def rfft_magnitude(x: np.ndarray, fft_size: int = 128) -> np.ndarray:
    """|X_k| for k = 0..fft_size/2 of ``x`` zero-padded to ``fft_size``.

    Operates on the last axis, so a ``(B, 64)`` stack of buffers gives
    ``(B, fft_size // 2 + 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not is_power_of_two(fft_size) or fft_size < x.shape[-1]:
        raise ConfigurationError(
            f"fft_size must be a power of two >= input length, got {fft_size} for {x.shape[-1]}"
        )
    return np.abs(np.fft.rfft(x, n=fft_size, axis=-1))


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x):
    return np.tanh(x)


def softsign(x):
    return x / (1.0 + np.abs(x))


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def gelu(x):
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x * x * x)))


def swish(x, beta=1.0):
    return x * sigmoid(beta * x)


ACTIVATIONS = ("linear", "gelu", "swish", "softsign")
