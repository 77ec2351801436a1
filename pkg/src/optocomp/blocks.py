"""Composite units: the recurrent blocks and the conditioning block.

All four block variants map a 2-vector to a 2-vector through
:func:`block_step`, so the model can swap them freely:

* ``s6``   in-projection split into a conv/swish/S6 path and a swish gate,
           multiplied, then a GELU projection back to the model width
* ``s4d``  in-projection, S4D layer, GELU projection
* ``lstm`` LSTM layer, linear projection
* ``ed``   LSTM whose state is produced each step by a causal conv encoder
           over the recent block inputs (pre-conditioning position only);
           at the post-conditioning position the LSTM keeps its own state

The conditioning block applies FiLM driven by the compression controls and
the spectrum features, a softsign GLU, temporal FiLM whose coefficients come
from a GRU over the timing controls and spectrum features, and a second GLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError
from .kernels import rfft_magnitude
from .layers import (
    CausalConvParams,
    ConvState,
    DenseParams,
    EncoderConvParams,
    GruParams,
    GruState,
    LstmParams,
    LstmState,
    S4dParams,
    S4dState,
    S6Params,
    S6State,
    causal_conv_step,
    conv_state,
    dense_step,
    encoder_conv_step,
    gru_state,
    gru_step,
    lstm_state,
    lstm_step,
    s4d_discretize,
    s4d_state,
    s4d_step,
    s6_state,
    s6_step,
)

VARIANTS = ("s6", "s4d", "ed", "lstm")
DEVICES = ("la2a", "cl1b")
N_CONTROLS = {"la2a": (2, 0), "cl1b": (2, 2)}  # (compression, timing)


@dataclass
class BlockParams:
    variant: str
    out_proj: DenseParams
    in_proj: Optional[DenseParams] = None
    conv: Optional[CausalConvParams] = None
    beta_conv: Any = None  # swish slope, shape (1,)
    beta_gate: Any = None
    s6: Optional[S6Params] = None
    s4d: Optional[S4dParams] = None
    lstm: Optional[LstmParams] = None
    encoder: Optional[EncoderConvParams] = None


@dataclass
class BlockState:
    variant: str
    conv: Optional[ConvState] = None
    s6: Optional[S6State] = None
    s4d: Optional[S4dState] = None
    lstm: Optional[LstmState] = None


@dataclass
class ConditioningParams:
    spec_kernel: Any  # (2, fft_size + 1)
    spec_bias: Any  # (2,)
    film: DenseParams  # (n_co + 2) -> 4
    glu1: DenseParams  # 2 -> 4
    gru: GruParams  # (n_ti + 2) -> 4
    glu2: DenseParams  # 2 -> 4


def block_state(p: BlockParams, batch=()) -> BlockState:
    v = p.variant
    if v == "s6":
        H, k = np.shape(ad.value(p.conv.kernel))
        N = np.shape(ad.value(p.s6.a_log))[1]
        return BlockState(v, conv=conv_state(H, k, batch), s6=s6_state(H, N, batch))
    if v == "s4d":
        H, N = np.shape(ad.value(p.s4d.C_re))
        return BlockState(v, s4d=s4d_state(H, N, batch))
    H = np.shape(ad.value(p.lstm.U))[1]
    if v == "lstm":
        return BlockState(v, lstm=lstm_state(H, batch))
    if v == "ed":
        if p.encoder is not None:
            k = np.shape(ad.value(p.encoder.kernel))[1] // 2
            return BlockState(v, conv=conv_state(2, k, batch))
        return BlockState(v, lstm=lstm_state(H, batch))
    raise ConfigurationError(f"unknown block variant {v!r}")


def _s6_block(p, s, u):
    z = dense_step(p.in_proj, u)
    d = np.shape(ad.value(p.in_proj.W))[0] // 2
    s_p, s_res = z[..., :d], z[..., d:]
    s_conv, conv = causal_conv_step(p.conv, s.conv, s_p)
    s_ssm, ssm = s6_step(p.s6, s.s6, ad.swish(s_conv, p.beta_conv))
    s_s = s_ssm * ad.swish(s_res, p.beta_gate)
    return dense_step(p.out_proj, s_s), BlockState("s6", conv=conv, s6=ssm)


def _s4d_block(p, s, u, disc=None):
    z = dense_step(p.in_proj, u)
    y, st = s4d_step(p.s4d, s.s4d, z, disc)
    return dense_step(p.out_proj, y), BlockState("s4d", s4d=st)


def _lstm_block(p, s, u):
    h, st = lstm_step(p.lstm, s.lstm, u)
    return dense_step(p.out_proj, h), BlockState("lstm", lstm=st)


def _ed_block(p, s, u):
    if p.encoder is None:
        h, st = lstm_step(p.lstm, s.lstm, u)
        return dense_step(p.out_proj, h), BlockState("ed", lstm=st)
    e, conv = encoder_conv_step(p.encoder, s.conv, u)
    H = np.shape(ad.value(p.lstm.U))[1]
    init = LstmState(ad.tanh(e[..., :H]), e[..., H:])
    h, _ = lstm_step(p.lstm, init, u)
    return dense_step(p.out_proj, h), BlockState("ed", conv=conv)


def block_step(p: BlockParams, state: BlockState, u, disc=None):
    """One sample through a block; ``disc`` optionally caches S4D discretization."""
    if state.variant != p.variant:
        raise ContractError(f"state for {state.variant!r} passed to {p.variant!r} block")
    if p.variant == "s6":
        return _s6_block(p, state, u)
    if p.variant == "s4d":
        return _s4d_block(p, state, u, disc)
    if p.variant == "lstm":
        return _lstm_block(p, state, u)
    if p.variant == "ed":
        return _ed_block(p, state, u)
    raise ConfigurationError(f"unknown block variant {p.variant!r}")


def block_discretization(p: BlockParams):
    return s4d_discretize(p.s4d) if p.variant == "s4d" else None


# -------------------------------------------------------------- conditioning


def spectrum_conv(p: ConditioningParams, mag):
    """One value per filter from a 'valid' conv over the centred, zero-padded spectrum."""
    n_bins = np.shape(mag)[-1]
    k = np.shape(ad.value(p.spec_kernel))[1]
    left = (k - n_bins) // 2
    # only the taps that meet real bins contribute; the padding is zero
    taps = p.spec_kernel[:, left : left + n_bins]
    return mag @ ad.transpose(taps) + p.spec_bias


def spectrum_features(x_buf, p: ConditioningParams, fft_size: int = 128):
    """Spectrum features f from the most recent input buffer."""
    return spectrum_conv(p, rfft_magnitude(x_buf, fft_size))


def conditioning_step(p: ConditioningParams, gru: GruState, g_m, p_co, p_ti, f):
    """FiLM -> GLU -> temporal FiLM -> GLU. Returns (g_c, new GRU state)."""
    n_film = np.shape(ad.value(p.film.W))[1]
    if np.shape(p_co)[-1] + 2 != n_film:
        raise ContractError(f"expected {n_film - 2} compression controls, got {np.shape(p_co)[-1]}")
    n_gru = np.shape(ad.value(p.gru.W))[1]
    if np.shape(p_ti)[-1] + 2 != n_gru:
        raise ContractError(f"expected {n_gru - 2} timing controls, got {np.shape(p_ti)[-1]}")

    ab = dense_step(p.film, ad.concat([p_co, f], axis=-1))
    k_f = ab[..., :2] * g_m + ab[..., 2:]

    k = dense_step(p.glu1, k_f)
    k_g = k[..., :2] * ad.softsign(k[..., 2:])

    cd, gru = gru_step(p.gru, gru, ad.concat([p_ti, f], axis=-1))
    k_nf = cd[..., :2] * k_g + cd[..., 2:]

    k = dense_step(p.glu2, k_nf)
    return k[..., :2] * ad.softsign(k[..., 2:]), gru
