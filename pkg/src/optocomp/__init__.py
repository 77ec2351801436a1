"""Neural models of optical dynamic range compressors.

A 64-sample input buffer drives a small recurrent network (selective state
space, diagonal state space, LSTM or encoder/decoder LSTM blocks around a
control-conditioned FiLM stage) that emits a gain coefficient for every
incoming sample.
"""

from .backend import AVAILABLE as AVAILABLE_BACKENDS
from .data import OracleSettings, Recording, normalize_controls, synth_compressor
from .model import (
    ControlParams,
    ModelConfig,
    StreamState,
    WeightStore,
    build_model,
    count_params,
    latency_ms,
    load_weights,
    process_sample,
    process_stream,
    save_weights,
)

__version__ = "0.1.0"

__all__ = [
    "AVAILABLE_BACKENDS",
    "ControlParams",
    "ModelConfig",
    "OracleSettings",
    "Recording",
    "StreamState",
    "WeightStore",
    "build_model",
    "count_params",
    "latency_ms",
    "load_weights",
    "normalize_controls",
    "process_sample",
    "process_stream",
    "save_weights",
    "synth_compressor",
]
