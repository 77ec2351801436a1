"""End-to-end compressor model, weight files and streaming state.

Signal path for one output sample::

    buffer (64 newest inputs) -> dense 64->2 -> block -> conditioning -> block
        -> dense 2->1 = g ;  y_n = g * x_n

The conditioning block additionally sees the magnitude spectrum of the buffer
and the normalized control values.
"""

from __future__ import annotations

import dataclasses
import json
import os
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .blocks import (
    DEVICES,
    N_CONTROLS,
    VARIANTS,
    BlockParams,
    BlockState,
    ConditioningParams,
    block_discretization,
    block_state,
    block_step,
    conditioning_step,
    spectrum_conv,
)
from .errors import (
    ConfigurationError,
    ContractError,
    ControlError,
    MissingTensorError,
    TensorShapeError,
    WeightFileError,
    WeightVersionError,
)
from .kernels import is_power_of_two, rfft_magnitude
from .layers import (
    CausalConvParams,
    DenseParams,
    EncoderConvParams,
    GruParams,
    GruState,
    LstmParams,
    S4dParams,
    S6Params,
    dense_step,
    gru_state,
)

FORMAT_VERSION = 1
SAMPLE_RATE = 48000


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "s6"
    device: str = "cl1b"
    d_model: int = 2
    d_inner: int = 3
    ssm_state: int = 4
    conv_kernel: int = 4
    rnn_hidden: int = 4
    fft_size: int = 128
    buffer_len: int = 64
    gru_hidden: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in VARIANTS:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}; expected one of {VARIANTS}")
        if self.device not in DEVICES:
            raise ConfigurationError(f"unknown device {self.device!r}; expected one of {DEVICES}")
        for name in ("d_model", "d_inner", "ssm_state", "conv_kernel", "rnn_hidden", "buffer_len", "gru_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_model != 2 or self.gru_hidden != 4:
            # the conditioning block is fixed at width 2 (GRU emits c and d)
            raise ConfigurationError("conditioning requires d_model == 2 and gru_hidden == 4")
        if not is_power_of_two(self.fft_size) or self.fft_size < self.buffer_len:
            raise ConfigurationError("fft_size must be a power of two >= buffer_len")

    @property
    def n_controls(self) -> tuple[int, int]:
        return N_CONTROLS[self.device]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    in_fc: DenseParams
    block1: BlockParams
    cond: ConditioningParams
    block2: BlockParams
    out_fc: DenseParams


@dataclass
class CoreState:
    block1: BlockState
    gru: GruState
    block2: BlockState


@dataclass(frozen=True, eq=False)
class ControlParams:
    """Normalized control values split into compression and timing groups."""

    device: str
    p_co: np.ndarray
    p_ti: np.ndarray

    def __post_init__(self):
        if self.device not in DEVICES:
            raise ControlError(f"unknown device {self.device!r}")
        co = np.asarray(self.p_co, dtype=np.float64).reshape(-1)
        ti = np.asarray(self.p_ti, dtype=np.float64).reshape(-1)
        n_co, n_ti = N_CONTROLS[self.device]
        if co.size != n_co or ti.size != n_ti:
            raise ControlError(
                f"{self.device} expects {n_co} compression and {n_ti} timing values, got {co.size} and {ti.size}"
            )
        if np.any(co < 0) or np.any(co > 1) or np.any(ti < 0) or np.any(ti > 1):
            raise ControlError("normalized controls must lie in [0, 1]")
        object.__setattr__(self, "p_co", co)
        object.__setattr__(self, "p_ti", ti)


# ------------------------------------------------------------ initialization


def _uniform(rng, shape, fan_in):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _dense(rng, n_in, n_out, act="linear", bias=0.0):
    return DenseParams(_uniform(rng, (n_out, n_in), n_in), np.full(n_out, float(bias)), act)


def _lstm(rng, n_in, H):
    U = np.concatenate([_orthogonal(rng, H) for _ in range(4)], axis=0)
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0
    return LstmParams(_uniform(rng, (4 * H, n_in), n_in), U, b)


def _gru(rng, n_in, H):
    U = np.concatenate([_orthogonal(rng, H) for _ in range(3)], axis=0)
    return GruParams(_uniform(rng, (3 * H, n_in), n_in), U, np.zeros(3 * H))


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def _s6(rng, H, N):
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=H))
    return S6Params(
        a_log=np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (H, 1)),
        D=np.ones(H),
        W_B=_uniform(rng, (N, H), H),
        b_B=np.zeros(N),
        W_C=_uniform(rng, (N, H), H),
        b_C=np.zeros(N),
        W_dt=_uniform(rng, (H, H), H) * 0.1,
        b_dt=_inv_softplus(dt),
    )


def _s4d(rng, H, N):
    return S4dParams(
        log_neg_re=np.full((H, N), np.log(0.5)),
        im=np.tile(np.pi * np.arange(N, dtype=np.float64), (H, 1)),
        log_dt=rng.uniform(np.log(1e-4), np.log(1e-1), size=H),
        B_re=np.ones((H, N)),
        B_im=np.zeros((H, N)),
        C_re=rng.standard_normal((H, N)) * 0.5 / np.sqrt(N),
        C_im=rng.standard_normal((H, N)) * 0.5 / np.sqrt(N),
        D=np.ones(H),
    )


def _block(rng, cfg: ModelConfig, position: int) -> BlockParams:
    d, di, v = cfg.d_model, cfg.d_inner, cfg.architecture
    if v == "s6":
        return BlockParams(
            "s6",
            in_proj=_dense(rng, d, 2 * di),
            conv=CausalConvParams(_uniform(rng, (di, cfg.conv_kernel), cfg.conv_kernel), np.zeros(di)),
            beta_conv=np.ones(1),
            beta_gate=np.ones(1),
            s6=_s6(rng, di, cfg.ssm_state),
            out_proj=_dense(rng, di, d, "gelu"),
        )
    if v == "s4d":
        return BlockParams(
            "s4d",
            in_proj=_dense(rng, d, di),
            s4d=_s4d(rng, di, cfg.ssm_state),
            out_proj=_dense(rng, di, d, "gelu"),
        )
    H = cfg.rnn_hidden
    p = BlockParams(v, lstm=_lstm(rng, d, H), out_proj=_dense(rng, H, d))
    if v == "ed" and position == 1:
        k = cfg.conv_kernel
        p.encoder = EncoderConvParams(_uniform(rng, (2 * H, k * d), k * d), np.zeros(2 * H))
    return p


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n_co, n_ti = cfg.n_controls
    k = cfg.fft_size + 1
    in_fc = _dense(rng, cfg.buffer_len, cfg.d_model)
    block1 = _block(rng, cfg, 1)
    cond = ConditioningParams(
        spec_kernel=_uniform(rng, (2, k), cfg.fft_size // 2 + 1),
        spec_bias=np.zeros(2),
        film=_dense(rng, n_co + 2, 4),
        glu1=_dense(rng, 2, 4),
        gru=_gru(rng, n_ti + 2, cfg.gru_hidden),
        glu2=_dense(rng, 2, 4),
    )
    block2 = _block(rng, cfg, 2)
    # start from unity gain: g = 1 + small feature term
    out_fc = _dense(rng, cfg.d_model, 1, bias=1.0)
    out_fc.W *= 0.1
    return ModelParams(in_fc, block1, cond, block2, out_fc)


# ---------------------------------------------------------- tree utilities


def _is_leaf(v) -> bool:
    return isinstance(v, (np.ndarray, ad.Var))


def flatten(tree, prefix: str = "") -> dict[str, Any]:
    """Dotted-name map of every array leaf in a dataclass tree."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(tree):
        v = getattr(tree, f.name)
        name = f"{prefix}{f.name}"
        if _is_leaf(v):
            out[name] = v
        elif dataclasses.is_dataclass(v):
            out.update(flatten(v, name + "."))
    return out


def unflatten(template, mapping: dict[str, Any], prefix: str = ""):
    """Copy of ``template`` with leaves replaced from ``mapping``."""
    changes = {}
    for f in dataclasses.fields(template):
        v = getattr(template, f.name)
        name = f"{prefix}{f.name}"
        if _is_leaf(v):
            changes[f.name] = mapping[name]
        elif dataclasses.is_dataclass(v):
            changes[f.name] = unflatten(v, mapping, name + ".")
    return dataclasses.replace(template, **changes)


def tree_map(fn, tree):
    return unflatten(tree, {k: fn(v) for k, v in flatten(tree).items()})


# -------------------------------------------------------------- weight store


@dataclass(eq=False)
class WeightStore:
    """Immutable named collection of parameter tensors for one architecture."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = {k: v.shape for k, v in flatten(_template(self.config)).items()}
        for name, shape in expected.items():
            if name not in self.tensors:
                raise MissingTensorError(f"missing tensor {name!r}")
            arr = np.array(self.tensors[name], dtype=np.float64, order="C")  # own copy; frozen below
            if arr.shape != shape:
                raise TensorShapeError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            self.tensors[name] = arr
        extra = set(self.tensors) - set(expected)
        if extra:
            raise WeightFileError(f"unexpected tensors {sorted(extra)}")
        # keep canonical order so files and counts are stable
        self.tensors = {k: self.tensors[k] for k in expected}

    def params(self) -> ModelParams:
        return unflatten(_template(self.config), self.tensors)

    def replace(self, **updates: np.ndarray) -> "WeightStore":
        t = dict(self.tensors)
        for k, v in updates.items():
            if k not in t:
                raise MissingTensorError(f"no tensor named {k!r}")
            t[k] = np.array(v, dtype=np.float64).reshape(t[k].shape)
        return WeightStore(self.config, t)


_TEMPLATES: dict[ModelConfig, ModelParams] = {}


def _template(cfg: ModelConfig) -> ModelParams:
    if cfg not in _TEMPLATES:
        _TEMPLATES[cfg] = init_params(cfg, seed=0)
    return _TEMPLATES[cfg]


def build_model(cfg: ModelConfig, seed: int | None = None) -> WeightStore:
    """Deterministic initial weights for ``cfg`` (``seed`` defaults to cfg.seed)."""
    return WeightStore(cfg, flatten(init_params(cfg, seed)))


def count_params(w: WeightStore) -> int:
    return int(sum(t.size for t in w.tensors.values()))


def save_weights(w: WeightStore, path) -> None:
    doc = {
        "format_version": w.format_version,
        "config": w.config.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in w.tensors.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_weights(path) -> WeightStore:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise WeightVersionError(f"unsupported weight format version {version!r} (expected {FORMAT_VERSION})")
    cfg = ModelConfig.from_dict(doc["config"])
    tensors = {}
    for name, t in doc["tensors"].items():
        data = np.array(t["data"], dtype=np.float64)
        shape = tuple(t["shape"])
        if data.size != int(np.prod(shape)):
            raise TensorShapeError(f"tensor {name!r}: {data.size} values for shape {shape}")
        tensors[name] = data.reshape(shape)
    return WeightStore(cfg, tensors)


# --------------------------------------------------------------- the network


def zero_core_state(params: ModelParams, batch=()) -> CoreState:
    H = np.shape(ad.value(params.cond.gru.U))[1]
    return CoreState(block_state(params.block1, batch), gru_state(H, batch), block_state(params.block2, batch))


def model_step(params: ModelParams, state: CoreState, window, mag, p_co, p_ti, discs=(None, None)):
    """Gain coefficient g for the newest sample of ``window``.

    ``window`` holds the buffer (newest last), ``mag`` its magnitude spectrum.
    Works batched over leading axes and on tape variables.
    """
    u = dense_step(params.in_fc, window)
    u, s1 = block_step(params.block1, state.block1, u, discs[0])
    f = spectrum_conv(params.cond, mag)
    u, gru = conditioning_step(params.cond, state.gru, u, p_co, p_ti, f)
    u, s2 = block_step(params.block2, state.block2, u, discs[1])
    g = dense_step(params.out_fc, u)[..., 0]
    return g, CoreState(s1, gru, s2)


def algorithmic_latency(cfg: ModelConfig) -> int:
    """Latency in samples: the input buffer length."""
    return cfg.buffer_len


def latency_ms(cfg: ModelConfig, sample_rate: int = SAMPLE_RATE) -> float:
    return 1000.0 * algorithmic_latency(cfg) / sample_rate


class StreamState:
    """All mutable per-stream state; single owner, never shared between streams."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.reset()

    def reset(self) -> None:
        self.buffer = np.zeros(self.cfg.buffer_len)
        self.core = zero_core_state(_template(self.cfg))
        self.g = np.zeros(1)

    def arrays(self) -> dict[str, np.ndarray]:
        """Named state arrays (live references, not copies)."""
        out = {"buffer": self.buffer, "g": self.g}
        out.update({f"core.{k}": v for k, v in flatten(self.core).items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.buffer = arrays["buffer"]
        self.g = arrays["g"]
        self.core = unflatten(self.core, {k[5:]: v for k, v in arrays.items() if k.startswith("core.")})

    def serialize(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.arrays().values()])


# ---------------------------------------------------------------- inference


class _PythonProcessor:
    def __init__(self, w: WeightStore):
        self.cfg = w.config
        self.params = w.params()
        self.discs = (block_discretization(self.params.block1), block_discretization(self.params.block2))

    def run(self, s: StreamState, x: np.ndarray, ctrl: ControlParams) -> np.ndarray:
        y = np.empty_like(x)
        buf, core = s.buffer, s.core
        fft = self.cfg.fft_size
        g = s.g[0]
        for n in range(x.shape[0]):
            buf = np.concatenate([buf[1:], x[n : n + 1]])
            g, core = model_step(self.params, core, buf, rfft_magnitude(buf, fft), ctrl.p_co, ctrl.p_ti, self.discs)
            y[n] = g * x[n]
        s.buffer, s.core, s.g = buf, core, np.array([g], dtype=np.float64)
        return y


_PROCESSORS: "weakref.WeakKeyDictionary[WeightStore, dict]" = weakref.WeakKeyDictionary()


def _processor(w: WeightStore, backend: str | None):
    from . import backend as _backend

    name = _backend.resolve(backend)
    cache = _PROCESSORS.setdefault(w, {})
    if name not in cache:
        cache[name] = _PythonProcessor(w) if name == "python" else _backend.compiled_processor(w)
    return cache[name]


def _check_controls(w: WeightStore, ctrl: ControlParams) -> None:
    if ctrl.device != w.config.device:
        raise ControlError(f"weights are for {w.config.device}, controls are for {ctrl.device}")


def process_sample(w: WeightStore, s: StreamState, x_n: float, ctrl: ControlParams, backend: str | None = None) -> float:
    _check_controls(w, ctrl)
    return float(_processor(w, backend).run(s, np.array([x_n], dtype=np.float64), ctrl)[0])


def process_stream(
    w: WeightStore, s: StreamState, x, ctrl: ControlParams, chunk: int = 4096, backend: str | None = None
) -> np.ndarray:
    """Process ``x`` in chunks; identical to calling :func:`process_sample` per sample."""
    _check_controls(w, ctrl)
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise ContractError("empty input stream")
    if chunk < 1:
        raise ContractError("chunk must be >= 1")
    proc = _processor(w, backend)
    return np.concatenate([proc.run(s, x[i : i + chunk], ctrl) for i in range(0, x.size, chunk)])
