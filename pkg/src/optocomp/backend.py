"""Selects the compiled streaming core, falling back to the numpy implementation.

Set ``OPTOCOMP_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigurationError

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

AVAILABLE = ("compiled", "python") if _core is not None else ("python",)
DEFAULT = "python" if os.environ.get("OPTOCOMP_BACKEND", "").lower() == "python" or _core is None else "compiled"


def resolve(name: str | None) -> str:
    name = DEFAULT if name is None else name
    if name not in ("compiled", "python"):
        raise ConfigurationError(f"unknown backend {name!r}")
    if name not in AVAILABLE:
        raise ConfigurationError("compiled backend is not built; reinstall the package or use backend='python'")
    return name


class _CompiledProcessor:
    def __init__(self, w):
        from .blocks import block_discretization

        params = w.params()
        discs = {}
        for pos in ("block1", "block2"):
            d = block_discretization(getattr(params, pos))
            if d is not None:
                discs[pos] = (d.a_re, d.a_im, d.b_re, d.b_im)
        spec = {
            "buffer_len": w.config.buffer_len,
            "fft_size": w.config.fft_size,
            "block1": params.block1.variant,
            "block2": params.block2.variant,
        }
        self.model = _core.CompiledModel(dict(w.tensors), spec, discs)

    def run(self, s, x, ctrl):
        arrays = s.arrays()
        fixed = False
        for k, v in arrays.items():
            if not (v.flags.c_contiguous and v.flags.writeable and v.dtype == np.float64):
                arrays[k] = np.array(v, dtype=np.float64, order="C")
                fixed = True
        if fixed:
            s.load_arrays(arrays)
        y = np.empty_like(x)
        self.model.run(arrays, x, y, ctrl.p_co, ctrl.p_ti)
        return y


def compiled_processor(w):
    return _CompiledProcessor(w)


def smooth_gain(target, a_att: float, a_rel: float, g0: float = 1.0, backend: str | None = None):
    """One-pole attack/release smoothing (see :func:`optocomp.data.synth_compressor`)."""
    target = np.ascontiguousarray(target, dtype=np.float64)
    if resolve(backend) == "compiled":
        return _core.smooth_gain(target, float(a_att), float(a_rel), float(g0))
    out = np.empty_like(target)
    g = g0
    for n, t in enumerate(target.tolist()):
        a = a_att if t < g else a_rel
        g = t + a * (g - t)
        out[n] = g
    return out
