import numpy as np
import pytest

from optocomp import backend, kernels
from optocomp.blocks import VARIANTS
from optocomp.errors import ConfigurationError
from optocomp.model import ControlParams, ModelConfig, StreamState, build_model, process_stream

import oracles

needs_core = pytest.mark.skipif("compiled" not in backend.AVAILABLE, reason="extension not built")


@needs_core
@pytest.mark.parametrize("arch", VARIANTS)
@pytest.mark.parametrize("device", ["cl1b", "la2a"])
def test_compiled_matches_python(arch, device, rng):
    w = build_model(ModelConfig(arch, device), 12)
    ctrl = ControlParams("cl1b", [0.3, 0.9], [0.5, 0.2]) if device == "cl1b" else ControlParams("la2a", [0.6, 0.0], [])
    x = rng.standard_normal(600) * 0.4
    yc = process_stream(w, StreamState(w.config), x, ctrl, backend="compiled")
    yp = process_stream(w, StreamState(w.config), x, ctrl, backend="python")
    assert np.max(np.abs(yc - yp)) < 1e-12


@needs_core
def test_compiled_state_continues_python_state(rng):
    w = build_model(ModelConfig("s6"), 2)
    ctrl = ControlParams("cl1b", [0.3, 0.9], [0.5, 0.2])
    x = rng.standard_normal(400) * 0.4
    ref = process_stream(w, StreamState(w.config), x, ctrl, backend="python")
    s = StreamState(w.config)
    a = process_stream(w, s, x[:150], ctrl, backend="python")
    b = process_stream(w, s, x[150:], ctrl, backend="compiled")
    assert np.max(np.abs(np.concatenate([a, b]) - ref)) < 1e-12


@needs_core
@pytest.mark.parametrize("n", [2, 8, 64, 128, 256])
def test_compiled_fft_matches_naive_dft(n, rng):
    from optocomp import _core

    x = rng.standard_normal(n // 2 + 1 if n > 2 else 2)
    assert np.max(np.abs(_core.fft_magnitude(x, n) - oracles.naive_rfft_mag(x, n))) < 1e-12
    assert np.max(np.abs(_core.fft_magnitude(x, n) - kernels.rfft_magnitude(x, n))) < 1e-12


@pytest.mark.parametrize("name", backend.AVAILABLE)
def test_smooth_gain_matches_hand_compressor(name, rng):
    x = rng.standard_normal(3000) * 0.5
    level = 20 * np.log10(np.maximum(np.abs(x), 1e-300))
    target = 10 ** (-np.maximum(level + 20, 0) * 0.75 / 20)
    g = backend.smooth_gain(target, 0.9, 0.999, backend=name)
    ref = oracles.hand_compressor(x, -20, 4, 0.9, 0.999)
    assert np.max(np.abs(g * x - ref)) < 1e-12


def test_unknown_backend():
    with pytest.raises(ConfigurationError):
        backend.resolve("gpu")


def test_fallback_selected_by_environment():
    import os
    import subprocess
    import sys

    code = "from optocomp import backend; print(backend.DEFAULT)"
    env = dict(os.environ, OPTOCOMP_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.strip() == "python"
    env.pop("OPTOCOMP_BACKEND")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.strip() == ("compiled" if "compiled" in backend.AVAILABLE else "python")
