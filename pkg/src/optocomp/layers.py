"""Primitive layers with a single-step streaming form.

Each ``*_step`` function takes parameters, the layer state and one input
frame, and returns ``(output, new_state)``. Inputs may carry any number of
leading batch axes: ``(channels,)`` when streaming, ``(B, channels)`` when
training. Parameters and states may be numpy arrays or autodiff variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, StabilityError
from .kernels import ACTIVATIONS

Array = Any  # np.ndarray or autodiff.Var


# ---------------------------------------------------------------- parameters


@dataclass
class DenseParams:
    W: Array  # (out, in)
    b: Array  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


@dataclass
class CausalConvParams:
    """Depthwise causal convolution, one kernel per channel."""

    kernel: Array  # (channels, k); last tap multiplies the current input
    bias: Array  # (channels,)


@dataclass
class EncoderConvParams:
    """Full (channel-mixing) causal convolution."""

    kernel: Array  # (out, k * channels), time-major flattening of the window
    bias: Array  # (out,)


@dataclass
class LstmParams:
    W: Array  # (4H, in) rows ordered input, forget, cell, output
    U: Array  # (4H, H)
    b: Array  # (4H,)


@dataclass
class GruParams:
    W: Array  # (3H, in) rows ordered update, reset, candidate
    U: Array  # (3H, H)
    b: Array  # (3H,)


@dataclass
class S4dParams:
    log_neg_re: Array  # (H, N); Re(lambda) = -exp(log_neg_re)
    im: Array  # (H, N)
    log_dt: Array  # (H,)
    B_re: Array  # (H, N)
    B_im: Array
    C_re: Array
    C_im: Array
    D: Array  # (H,)


@dataclass
class S6Params:
    a_log: Array  # (H, N); A = -exp(a_log)
    D: Array  # (H,)
    W_B: Array  # (N, H)
    b_B: Array  # (N,)
    W_C: Array  # (N, H)
    b_C: Array  # (N,)
    W_dt: Array  # (H, H)
    b_dt: Array  # (H,)


# -------------------------------------------------------------------- states


@dataclass
class ConvState:
    fifo: Array  # (..., k - 1, channels), oldest first


@dataclass
class LstmState:
    h: Array
    c: Array


@dataclass
class GruState:
    h: Array


@dataclass
class S6State:
    h: Array  # (..., H, N)


@dataclass
class S4dState:
    h_re: Array  # (..., H, N)
    h_im: Array


def _zeros(batch, *shape):
    return np.zeros(tuple(batch) + tuple(shape))


def conv_state(channels: int, k: int, batch=()) -> ConvState:
    if k < 1:
        raise ConfigurationError("conv kernel length must be >= 1")
    return ConvState(_zeros(batch, k - 1, channels))


def lstm_state(hidden: int, batch=()) -> LstmState:
    return LstmState(_zeros(batch, hidden), _zeros(batch, hidden))


def gru_state(hidden: int, batch=()) -> GruState:
    return GruState(_zeros(batch, hidden))


def s6_state(channels: int, n: int, batch=()) -> S6State:
    return S6State(_zeros(batch, channels, n))


def s4d_state(channels: int, n: int, batch=()) -> S4dState:
    return S4dState(_zeros(batch, channels, n), _zeros(batch, channels, n))


# ---------------------------------------------------------------- operations


def activate(z, activation: str):
    if activation == "linear":
        return z
    if activation == "gelu":
        return ad.gelu(z)
    if activation == "swish":
        return ad.swish(z)
    if activation == "softsign":
        return ad.softsign(z)
    raise ConfigurationError(f"unknown activation {activation!r}")


def dense_step(p: DenseParams, x):
    if np.shape(ad.value(x))[-1] != np.shape(ad.value(p.W))[1]:
        raise ContractError(f"dense expects {np.shape(ad.value(p.W))[1]} inputs, got {np.shape(ad.value(x))}")
    return activate(x @ ad.transpose(p.W) + p.b, p.activation)


def causal_conv_step(p: CausalConvParams, state: ConvState, x):
    if state is None or state.fifo is None:
        raise ContractError("causal conv state is not initialized")
    window = ad.concat([state.fifo, x[..., None, :]], axis=-2)  # (..., k, C)
    y = ad.sum(window * ad.transpose(p.kernel), axis=-2) + p.bias
    return y, ConvState(window[..., 1:, :])


def encoder_conv_step(p: EncoderConvParams, state: ConvState, x):
    window = ad.concat([state.fifo, x[..., None, :]], axis=-2)
    lead = np.shape(ad.value(window))[:-2]
    flat = ad.reshape(window, lead + (-1,))
    return flat @ ad.transpose(p.kernel) + p.bias, ConvState(window[..., 1:, :])


def lstm_step(p: LstmParams, state: LstmState, x):
    H = np.shape(ad.value(p.U))[1]
    if np.shape(ad.value(state.h))[-1] != H:
        raise ContractError("LSTM state size does not match parameters")
    z = x @ ad.transpose(p.W) + state.h @ ad.transpose(p.U) + p.b
    i = ad.sigmoid(z[..., :H])
    f = ad.sigmoid(z[..., H : 2 * H])
    g = ad.tanh(z[..., 2 * H : 3 * H])
    o = ad.sigmoid(z[..., 3 * H :])
    c = f * state.c + i * g
    h = o * ad.tanh(c)
    return h, LstmState(h, c)


def gru_step(p: GruParams, state: GruState, x):
    """GRU with the reset gate applied to the state before the recurrent product."""
    H = np.shape(ad.value(p.U))[1]
    if np.shape(ad.value(state.h))[-1] != H:
        raise ContractError("GRU state size does not match parameters")
    h = state.h
    zr = x @ ad.transpose(p.W[: 2 * H]) + h @ ad.transpose(p.U[: 2 * H]) + p.b[: 2 * H]
    z = ad.sigmoid(zr[..., :H])
    r = ad.sigmoid(zr[..., H:])
    n = ad.tanh(x @ ad.transpose(p.W[2 * H :]) + (r * h) @ ad.transpose(p.U[2 * H :]) + p.b[2 * H :])
    h_new = n + z * (h - n)
    return h_new, GruState(h_new)


@dataclass
class S4dDiscrete:
    a_re: Array
    a_im: Array
    b_re: Array
    b_im: Array


def zoh_discretize(lam: np.ndarray, dt, B: np.ndarray):
    """Zero-order hold for a diagonal complex system: (exp(dt*lam), (exp(dt*lam)-1)/lam * B)."""
    lam = np.asarray(lam, dtype=np.complex128)
    if np.any(lam.real >= 0):
        raise StabilityError("diagonal state matrix needs Re(lambda) < 0")
    if np.any(np.asarray(dt) <= 0):
        raise ContractError("step size must be positive")
    a = np.exp(dt * lam)
    return a, (a - 1.0) / lam * B


def s4d_discretize(p: S4dParams) -> S4dDiscrete:
    """ZOH discretization in real arithmetic so it differentiates on the tape."""
    lam_re = -ad.exp(p.log_neg_re)
    dt = ad.exp(p.log_dt)[..., None]
    mag = ad.exp(dt * lam_re)
    ang = dt * p.im
    a_re = mag * ad.cos(ang)
    a_im = mag * ad.sin(ang)
    den = lam_re * lam_re + p.im * p.im
    am1 = a_re - 1.0
    q_re = (am1 * lam_re + a_im * p.im) / den
    q_im = (a_im * lam_re - am1 * p.im) / den
    b_re = q_re * p.B_re - q_im * p.B_im
    b_im = q_re * p.B_im + q_im * p.B_re
    return S4dDiscrete(a_re, a_im, b_re, b_im)


def s4d_step(p: S4dParams, state: S4dState, j, disc: S4dDiscrete | None = None):
    """h <- a*h + b*j (complex, per channel); o = Re(sum_n C h) + D j."""
    if disc is None:
        disc = s4d_discretize(p)
    if not isinstance(disc.a_re, ad.Var):
        if np.any(np.hypot(disc.a_re, disc.a_im) >= 1.0):
            raise StabilityError("discretized S4D state matrix has |a| >= 1")
    jj = j[..., None]
    h_re = disc.a_re * state.h_re - disc.a_im * state.h_im + disc.b_re * jj
    h_im = disc.a_re * state.h_im + disc.a_im * state.h_re + disc.b_im * jj
    o = ad.sum(p.C_re * h_re - p.C_im * h_im, axis=-1) + p.D * j
    return o, S4dState(h_re, h_im)


def s6_step(p: S6Params, state: S6State, j):
    """Selective scan step with input-dependent B, C and step size."""
    Bn = j @ ad.transpose(p.W_B) + p.b_B  # (..., N)
    Cn = j @ ad.transpose(p.W_C) + p.b_C  # (..., N)
    dt = ad.softplus(j @ ad.transpose(p.W_dt) + p.b_dt)  # (..., H)
    A = -ad.exp(p.a_log)  # (H, N)
    dtc = dt[..., None]
    a_bar = ad.exp(A * dtc)  # (..., H, N)
    b_bar = dtc * Bn[..., None, :]
    h = a_bar * state.h + b_bar * j[..., None]
    o = ad.sum(Cn[..., None, :] * h, axis=-1) + p.D * j
    return o, S6State(h)
