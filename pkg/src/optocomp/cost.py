"""Parameter and FLOP accounting per output sample.

Conventions: a multiply and an add each count as one FLOP; every nonlinear
activation (sigmoid, tanh, softsign, swish, GELU, softplus, exp) is charged
``ACT`` FLOPs per element. Closed forms per layer:

==================  ==============================================================
dense(i, o)          2*i*o + o  (+ ACT*o when activated)
conv depthwise       2*k*C + C
conv full            2*k*C*O + O
S6(H, N)             B and C projections 2*(2*H*N + N); step-size projection
                     2*H*H + H and softplus ACT*H; A*dt H*N and exp ACT*H*N;
                     dt*B H*N; state update 3*H*N; readout H*(2*N + 1)
S4D(H, N)            complex update 10*H*N; readout H*(4*N + 1)
                     (discretization is fixed at inference and not counted)
LSTM(i, H)           8*H*i + 8*H*H + 4*H gates, 5*ACT*H, 4*H state/output
GRU(i, H)            6*H*i + 6*H*H + 3*H gates, 3*ACT*H, H reset product, 3*H blend
spectrum conv        2*bins*F + F over the taps that meet non-padded bins
FiLM / TFiLM apply   2 per element; GLU: dense + ACT*n + n
==================  ==============================================================

The FFT that produces the magnitude spectrum is feature extraction rather
than a network layer; it is reported as a separate line item
(5*n*log2(n) for the transform plus 3 + ACT per magnitude bin) and excluded
from ``network`` totals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import log2

from .model import ModelConfig, build_model, count_params

ACT = 10

# (FLOPs/sample, parameters), LA-2A then CL 1B
REFERENCE = {
    "s6": {"la2a": (1242, 984), "cl1b": (1290, 1000)},
    "s4d": {"la2a": (1220, 1027), "cl1b": (1268, 1043)},
    "ed": {"la2a": (1252, 1009), "cl1b": (1300, 1025)},
    "lstm": {"la2a": (1668, 989), "cl1b": (1716, 1005)},
}
REFERENCE_CONDITIONING_FLOPS = {"cl1b": 352, "la2a": 400}


def dense_flops(n_in: int, n_out: int, activated: bool = False) -> int:
    return 2 * n_in * n_out + n_out + (ACT * n_out if activated else 0)


def dense_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def depthwise_conv_flops(channels: int, k: int) -> int:
    return 2 * k * channels + channels


def full_conv_flops(channels: int, k: int, n_out: int) -> int:
    return 2 * k * channels * n_out + n_out


def s6_flops(H: int, N: int) -> int:
    proj = 2 * (2 * H * N + N)
    step = 2 * H * H + H + ACT * H
    disc = H * N + ACT * H * N + H * N
    update = 3 * H * N
    readout = H * (2 * N + 1)
    return proj + step + disc + update + readout


def s6_params(H: int, N: int) -> int:
    return H * N + H + 2 * (N * H + N) + H * H + H


def s4d_flops(H: int, N: int) -> int:
    return 10 * H * N + H * (4 * N + 1)


def s4d_params(H: int, N: int) -> int:
    return 6 * H * N + 2 * H


def lstm_flops(n_in: int, H: int) -> int:
    return 8 * H * n_in + 8 * H * H + 4 * H + 5 * ACT * H + 4 * H


def lstm_params(n_in: int, H: int) -> int:
    return 4 * H * n_in + 4 * H * H + 4 * H


def gru_flops(n_in: int, H: int) -> int:
    return 6 * H * n_in + 6 * H * H + 3 * H + 3 * ACT * H + H + 3 * H


def gru_params(n_in: int, H: int) -> int:
    return 3 * H * n_in + 3 * H * H + 3 * H


def glu_flops(n: int) -> int:
    return dense_flops(n, 2 * n) + ACT * n + n


def fft_magnitude_flops(n: int) -> int:
    return int(5 * n * log2(n)) + (n // 2 + 1) * (3 + ACT)


@dataclass
class CostReport:
    architecture: str
    device: str
    items: list[tuple[str, int, int]] = field(default_factory=list)  # (name, flops, params)
    fft_flops: int = 0

    @property
    def flops(self) -> int:
        return sum(f for _, f, _ in self.items)

    @property
    def params(self) -> int:
        return sum(p for _, _, p in self.items)

    @property
    def conditioning_flops(self) -> int:
        return sum(f for n, f, _ in self.items if n.startswith("conditioning"))

    def reference(self) -> tuple[int, int]:
        return REFERENCE[self.architecture][self.device]

    def table(self) -> str:
        ref_f, ref_p = self.reference()
        lines = [f"# {self.architecture}/{self.device}", "item\tflops_per_sample\tparams"]
        lines += [f"{n}\t{f}\t{p}" for n, f, p in self.items]
        lines.append(f"network_total\t{self.flops}\t{self.params}")
        lines.append(f"reference\t{ref_f}\t{ref_p}")
        lines.append(f"ratio_to_reference\t{self.flops / ref_f:.3f}\t{self.params / ref_p:.3f}")
        lines.append(
            f"conditioning_total\t{self.conditioning_flops}\treference {REFERENCE_CONDITIONING_FLOPS[self.device]}"
        )
        lines.append(f"fft_magnitude (feature extraction, excluded)\t{self.fft_flops}\t0")
        lines.append(f"total_with_fft\t{self.flops + self.fft_flops}\t{self.params}")
        return "\n".join(lines)


def _block_items(cfg: ModelConfig, position: int) -> list[tuple[str, int, int]]:
    d, H, N, k = cfg.d_model, cfg.d_inner, cfg.ssm_state, cfg.conv_kernel
    p = f"block{position}"
    v = cfg.architecture
    if v == "s6":
        return [
            (f"{p}.in_proj", dense_flops(d, 2 * H), dense_params(d, 2 * H)),
            (f"{p}.conv", depthwise_conv_flops(H, k), H * k + H),
            (f"{p}.swish", 2 * ACT * H, 2),
            (f"{p}.s6", s6_flops(H, N), s6_params(H, N)),
            (f"{p}.gate", H, 0),
            (f"{p}.out_proj", dense_flops(H, d, True), dense_params(H, d)),
        ]
    if v == "s4d":
        return [
            (f"{p}.in_proj", dense_flops(d, H), dense_params(d, H)),
            (f"{p}.s4d", s4d_flops(H, N), s4d_params(H, N)),
            (f"{p}.out_proj", dense_flops(H, d, True), dense_params(H, d)),
        ]
    R = cfg.rnn_hidden
    items = []
    if v == "ed" and position == 1:
        items.append((f"{p}.encoder", full_conv_flops(d, k, 2 * R) + ACT * R, 2 * R * k * d + 2 * R))
    items.append((f"{p}.lstm", lstm_flops(d, R), lstm_params(d, R)))
    items.append((f"{p}.out_proj", dense_flops(R, d), dense_params(R, d)))
    return items


def count_flops(cfg: ModelConfig) -> CostReport:
    """Closed-form per-sample cost of ``cfg``, one line item per layer."""
    n_co, n_ti = cfg.n_controls
    bins = cfg.fft_size // 2 + 1
    G = cfg.gru_hidden
    rep = CostReport(cfg.architecture, cfg.device)
    rep.items.append(("in_fc", dense_flops(cfg.buffer_len, cfg.d_model), dense_params(cfg.buffer_len, cfg.d_model)))
    rep.items += _block_items(cfg, 1)
    rep.items += [
        ("conditioning.spectrum_conv", 2 * bins * 2 + 2, 2 * (cfg.fft_size + 1) + 2),
        ("conditioning.film", dense_flops(n_co + 2, 4) + 4, dense_params(n_co + 2, 4)),
        ("conditioning.glu1", glu_flops(2), dense_params(2, 4)),
        ("conditioning.tfilm_gru", gru_flops(n_ti + 2, G) + 4, gru_params(n_ti + 2, G)),
        ("conditioning.glu2", glu_flops(2), dense_params(2, 4)),
    ]
    rep.items += _block_items(cfg, 2)
    rep.items.append(("out_fc", dense_flops(cfg.d_model, 1), dense_params(cfg.d_model, 1)))
    rep.items.append(("output_gain", 1, 0))
    rep.fft_flops = fft_magnitude_flops(cfg.fft_size)
    return rep


def check_param_count(cfg: ModelConfig) -> bool:
    """Closed-form parameter total agrees with the tensors build_model creates."""
    return count_flops(cfg).params == count_params(build_model(cfg))
