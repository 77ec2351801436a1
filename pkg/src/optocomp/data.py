"""Audio files, control ranges, dataset splits, training batches and the oracle compressor."""

from __future__ import annotations

import csv
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile

from . import backend as _backend
from .errors import ContractError, ControlError, DataError
from .model import SAMPLE_RATE, ControlParams

# ------------------------------------------------------------------ WAV I/O

ENCODINGS = ("float64", "float32", "pcm16", "pcm24")


def load_wav(path) -> tuple[np.ndarray, int]:
    """Mono samples scaled to [-1, 1] and the sample rate.

    Integer PCM is divided by the full-scale magnitude (32768 for 16-bit);
    24-bit files arrive left-justified in int32 and are divided by 2**31.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        if data.ndim == 2 and data.shape[1] == 1:
            data = data[:, 0]
        else:
            raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample encoding {data.dtype}")
    return x, int(rate)


def save_wav(path, samples, rate: int = SAMPLE_RATE, encoding: str = "float64") -> None:
    """Write mono audio. ``float64`` round-trips exactly; PCM is clipped to full scale."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if encoding == "float64":
        wavfile.write(str(path), rate, x)
    elif encoding == "float32":
        wavfile.write(str(path), rate, x.astype(np.float32))
    elif encoding in ("pcm16", "pcm24"):
        bits = 16 if encoding == "pcm16" else 24
        full = float(2 ** (bits - 1))
        q = np.clip(np.round(x * full), -full, full - 1).astype("<i4")
        raw = q.astype("<i2").tobytes() if bits == 16 else q.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(bits // 8)
            f.setframerate(rate)
            f.writeframes(raw)
    else:
        raise ContractError(f"unknown encoding {encoding!r}; expected one of {ENCODINGS}")


# ----------------------------------------------------------------- controls

# raw value mapped to 0 first, then to 1
CONTROL_RANGES = {
    "cl1b": {"threshold": (0.0, -40.0), "ratio": (2.0, 10.0), "attack": (0.5, 500.0), "release": (0.005, 10.0)},
    "la2a": {"peak_reduction": (0.0, 100.0), "switch": (0.0, 1.0)},
}
CONTROL_GROUPS = {
    "cl1b": (("threshold", "ratio"), ("attack", "release")),
    "la2a": (("peak_reduction", "switch"), ()),
}
CONTROL_UNITS = {"threshold": "dBu", "ratio": ":1", "attack": "ms", "release": "s", "peak_reduction": "", "switch": ""}


def normalize_controls(raw: dict, device: str) -> ControlParams:
    """Linear map of raw knob values (device units) onto [0, 1]."""
    if device not in CONTROL_RANGES:
        raise ControlError(f"unknown device {device!r}")
    ranges = CONTROL_RANGES[device]
    unknown = set(raw) - set(ranges)
    if unknown:
        raise ControlError(f"unknown {device} controls {sorted(unknown)}")
    norm = {}
    for name, (lo, hi) in ranges.items():
        if name not in raw:
            raise ControlError(f"missing {device} control {name!r}")
        v = float(raw[name])
        if not min(lo, hi) <= v <= max(lo, hi):
            raise ControlError(f"{name}={v} outside [{min(lo, hi)}, {max(lo, hi)}]")
        norm[name] = (v - lo) / (hi - lo)
    co, ti = CONTROL_GROUPS[device]
    return ControlParams(device, np.array([norm[k] for k in co]), np.array([norm[k] for k in ti]))


def denormalize_controls(ctrl: ControlParams) -> dict[str, float]:
    co, ti = CONTROL_GROUPS[ctrl.device]
    values = dict(zip(co, ctrl.p_co.tolist())) | dict(zip(ti, ctrl.p_ti.tolist()))
    return {k: lo + values[k] * (hi - lo) for k, (lo, hi) in CONTROL_RANGES[ctrl.device].items()}


# --------------------------------------------------------------- recordings


@dataclass
class Recording:
    """Input/output pair captured at one fixed control setting."""

    x: np.ndarray
    y: np.ndarray
    device: str
    controls: dict
    sample_rate: int = SAMPLE_RATE
    name: str = ""
    ctrl: ControlParams = field(init=False, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.size != self.y.size:
            raise DataError(f"{self.name}: input has {self.x.size} samples, output {self.y.size}")
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"{self.name}: sample rate {self.sample_rate}, expected {SAMPLE_RATE}")
        self.ctrl = normalize_controls(self.controls, self.device)

    def __len__(self) -> int:
        return self.x.size

    def segment(self, start: int, stop: int, suffix: str) -> "Recording":
        return Recording(self.x[start:stop], self.y[start:stop], self.device, dict(self.controls), self.sample_rate,
                         f"{self.name}{suffix}")


class SplitWarning(UserWarning):
    pass


def moving_rms(x: np.ndarray, width: int) -> np.ndarray:
    """RMS of x[n - width // 2 : n - width // 2 + width] for every n (zero outside the signal)."""
    pad = np.concatenate([np.zeros(width // 2), np.asarray(x, dtype=np.float64) ** 2, np.zeros(width)])
    c = np.concatenate([[0.0], np.cumsum(pad)])
    n = np.arange(len(x))
    return np.sqrt(np.maximum(c[n + width] - c[n], 0.0) / width)


def find_split(x, fraction: float = 0.9, sample_rate: int = SAMPLE_RATE, silence_db: float = -60.0,
               window_s: float = 0.010, radius_s: float = 2.0) -> int:
    """Index of the silent point nearest ``fraction * len(x)`` within the search radius.

    Falls back to the exact fractional point (with a :class:`SplitWarning`)
    when no 10 ms window within the radius is below ``silence_db``.
    """
    x = np.asarray(x, dtype=np.float64)
    target = int(round(fraction * x.size))
    r = int(radius_s * sample_rate)
    lo, hi = max(1, target - r), min(x.size - 1, target + r)
    quiet = np.flatnonzero(moving_rms(x, max(1, int(window_s * sample_rate)))[lo : hi + 1] < 10 ** (silence_db / 20))
    if quiet.size == 0:
        warnings.warn(f"no silence within {radius_s} s of the {fraction:.0%} point; splitting there exactly",
                      SplitWarning, stacklevel=2)
        return target
    cand = quiet + lo
    return int(cand[np.argmin(np.abs(cand - target))])  # ties resolve to the earlier point


def split_train_test(recordings: Sequence[Recording], fraction: float = 0.9, **kw):
    """Per-recording time split at silence near the fractional point; returns (train, test)."""
    train, test = [], []
    for rec in recordings:
        if len(rec) < 2:
            raise DataError(f"{rec.name}: too short to split")
        k = find_split(rec.x, fraction, rec.sample_rate, **kw)
        train.append(rec.segment(0, k, ":train"))
        test.append(rec.segment(k, len(rec), ":test"))
    return train, test


def carve_validation(recordings: Sequence[Recording], fraction: float = 0.9):
    """(fit, validation): the last 10% of each training recording, cut at the exact point."""
    fit, val = [], []
    for rec in recordings:
        k = int(round(fraction * len(rec)))
        fit.append(rec.segment(0, k, ":fit"))
        val.append(rec.segment(k, len(rec), ":val"))
    return fit, val


# ------------------------------------------------------------------ batches


@dataclass
class ExampleBatch:
    """Aligned steps from B strips; row b always belongs to strip ``strip[b]``."""

    windows: np.ndarray  # (B, L, buffer_len), newest sample last
    targets: np.ndarray  # (B, L)
    p_co: np.ndarray  # (B, n_co)
    p_ti: np.ndarray  # (B, n_ti)
    strip: np.ndarray  # (B,)
    step: int  # offset of the first window within each strip
    reset: bool  # states start from zero (first batch of the strips)

    @property
    def inputs(self) -> np.ndarray:
        return self.windows[..., -1]


class BatchPlan:
    """Partition of the training recordings into B contiguous strips.

    The strip length Ls is the largest length for which the recordings yield
    at least B whole strips; trailing samples of each recording that do not
    fill a strip are left out. Batch t stacks the windows ending at offset t
    of every strip, so recurrent state carries from batch t to t + 1.
    """

    def __init__(self, recordings: Sequence[Recording], batch_size: int, seed: int = 0,
                 buffer_len: int = 64, tbptt_window: int = 1):
        if not recordings:
            raise DataError("no training recordings")
        if batch_size < 1 or tbptt_window < 1:
            raise ContractError("batch size and window must be positive")
        lengths = [len(r) for r in recordings]
        if sum(lengths) < batch_size * tbptt_window:
            raise DataError(f"{sum(lengths)} examples cannot fill one batch of {batch_size} x {tbptt_window}")
        self.batch_size, self.buffer_len, self.window = batch_size, buffer_len, tbptt_window
        self.strip_len = self._strip_length(lengths, batch_size)
        self.strip_len -= self.strip_len % tbptt_window

        pad = buffer_len - 1
        xs, ys, offsets, pos = [], [], [], 0
        for r in recordings:
            xs += [np.zeros(pad), r.x]
            ys.append(r.y)
            offsets.append(pos)
            pos += pad + len(r)
        self._x = np.concatenate(xs)
        self._y = np.concatenate(ys)
        y_offsets = np.cumsum([0] + lengths[:-1])

        strips = [(ri, k * self.strip_len) for ri, n in enumerate(lengths) for k in range(n // self.strip_len)]
        rng = np.random.default_rng(seed)
        ids = np.sort(rng.permutation(len(strips))[:batch_size])[rng.permutation(batch_size)]
        chosen = [strips[i] for i in ids]
        self.strips = chosen  # (recording index, start sample), one per row
        self._xstart = np.array([offsets[ri] + s for ri, s in chosen])
        self._ystart = np.array([y_offsets[ri] + s for ri, s in chosen])
        self._co = np.stack([recordings[ri].ctrl.p_co for ri, _ in chosen])
        self._ti = np.stack([recordings[ri].ctrl.p_ti for ri, _ in chosen]).reshape(batch_size, -1)
        self._strip_ids = ids

    @staticmethod
    def _strip_length(lengths, B) -> int:
        lo, hi = 1, max(lengths)
        if sum(n // lo for n in lengths) < B:
            raise DataError("not enough samples for the batch size")
        while lo < hi:  # largest Ls with sum(n // Ls) >= B
            mid = (lo + hi + 1) // 2
            if sum(n // mid for n in lengths) >= B:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def __len__(self) -> int:
        return self.strip_len // self.window

    def batch(self, i: int) -> ExampleBatch:
        t0 = i * self.window
        steps = t0 + np.arange(self.window)
        idx = self._xstart[:, None, None] + steps[None, :, None] + np.arange(self.buffer_len)[None, None, :]
        return ExampleBatch(
            windows=self._x[idx],
            targets=self._y[self._ystart[:, None] + steps[None, :]],
            p_co=self._co,
            p_ti=self._ti,
            strip=self._strip_ids,
            step=t0,
            reset=(t0 == 0),
        )

    def __iter__(self) -> Iterator[ExampleBatch]:
        for i in range(len(self)):
            yield self.batch(i)


def make_batches(recordings, batch_size: int = 2400, seed: int = 0, buffer_len: int = 64,
                 tbptt_window: int = 1) -> BatchPlan:
    return BatchPlan(recordings, batch_size, seed, buffer_len, tbptt_window)


# -------------------------------------------------------- oracle compressor


@dataclass(frozen=True)
class OracleSettings:
    threshold_db: float = -20.0
    ratio: float = 4.0
    attack_ms: float = 5.0
    release_ms: float = 100.0
    makeup_db: float = 0.0

    def __post_init__(self):
        if self.ratio < 1:
            raise ContractError("ratio must be >= 1")
        if self.attack_ms <= 0 or self.release_ms <= 0:
            raise ContractError("attack and release times must be positive")

    def cl1b_controls(self) -> dict:
        """Raw CL 1B knob values (dBu taken equal to dBFS)."""
        return {"threshold": self.threshold_db, "ratio": self.ratio, "attack": self.attack_ms,
                "release": self.release_ms / 1000.0}


def one_pole_coefficient(time_s: float, sample_rate: int = SAMPLE_RATE) -> float:
    return float(np.exp(-1.0 / (time_s * sample_rate)))


def static_gain_db(level_db, threshold_db: float, ratio: float):
    """Hard-knee gain (dB, <= 0) for an input level."""
    return -np.maximum(np.asarray(level_db) - threshold_db, 0.0) * (1.0 - 1.0 / ratio)


def synth_compressor(x, s: OracleSettings, sample_rate: int = SAMPLE_RATE, backend: str | None = None) -> np.ndarray:
    """Feed-forward compressor: peak level -> static curve -> attack/release smoothing of the gain."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    with np.errstate(divide="ignore"):
        level = 20.0 * np.log10(np.abs(x))
    target = 10.0 ** (static_gain_db(level, s.threshold_db, s.ratio) / 20.0)
    g = _backend.smooth_gain(target, one_pole_coefficient(s.attack_ms / 1000.0, sample_rate),
                             one_pole_coefficient(s.release_ms / 1000.0, sample_rate), 1.0, backend)
    return x * g * 10.0 ** (s.makeup_db / 20.0)


def desk_source(seconds: float, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Test material: noise bursts, tones and decaying transients at peak levels from -18 to 0 dBFS.

    Segments of 50-500 ms are separated by short silences so the split
    search finds quiet points.
    """
    rng = np.random.default_rng(seed)
    n_total = int(seconds * sample_rate)
    out = np.zeros(n_total)
    pos = 0
    while pos < n_total:
        n = int(rng.uniform(0.05, 0.5) * sample_rate)
        t = np.arange(n) / sample_rate
        kind = rng.integers(3)
        if kind == 0:
            seg = rng.standard_normal(n) / 3.0
        elif kind == 1:
            f = rng.uniform(60, 4000)
            seg = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
            if rng.random() < 0.5:
                seg = seg + 0.5 * np.sin(2 * np.pi * rng.uniform(60, 4000) * t)
                seg = seg / 1.5
        else:
            tau = rng.uniform(0.005, 0.08)
            seg = np.exp(-t / tau) * (rng.standard_normal(n) / 3.0 + np.sin(2 * np.pi * rng.uniform(50, 200) * t))
        ramp = min(n // 4, int(0.002 * sample_rate))
        env = np.ones(n)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[n - ramp :] = np.linspace(1, 0, ramp)
        seg = np.clip(seg, -1, 1) * env * 10 ** (rng.uniform(-18, 0) / 20)
        take = min(n, n_total - pos)
        out[pos : pos + take] = seg[:take]
        pos += take + int(rng.uniform(0.0, 0.05) * sample_rate)
    return out


DESK_GRID = tuple(
    OracleSettings(threshold_db=-10.0, ratio=6.0, attack_ms=a, release_ms=r)
    for a in (0.5, 500.0)
    for r in (5.0, 5000.0)
)


def desk_dataset(seconds_per_setting: float = 15.0, seed: int = 0, grid=DESK_GRID) -> list[Recording]:
    """One recording per oracle setting over the same source material."""
    x = desk_source(seconds_per_setting, seed)
    return [
        Recording(x, synth_compressor(x, s), "cl1b", s.cl1b_controls(), name=f"a{s.attack_ms:g}ms_r{s.release_ms:g}ms")
        for s in grid
    ]


# ----------------------------------------------------------------- manifest

MANIFEST_FIELDS = ("input", "output", "device", "controls")


@dataclass
class ManifestEntry:
    input: Path
    output: Path
    device: str
    controls: dict
    prediction: Path | None = None

    def load(self) -> Recording:
        x, rx = load_wav(self.input)
        y, ry = load_wav(self.output)
        if rx != ry:
            raise DataError(f"{self.input} and {self.output} have different sample rates")
        return Recording(x, y, self.device, self.controls, rx, name=self.input.stem)


def _format_controls(c: dict) -> str:
    return ";".join(f"{k}={v!r}" for k, v in c.items())


def _parse_controls(s: str) -> dict:
    out = {}
    for item in filter(None, s.split(";")):
        k, sep, v = item.partition("=")
        if not sep:
            raise DataError(f"bad control entry {item!r}; expected name=value")
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise DataError(f"control {k!r} has non-numeric value {v!r}") from exc
    return out


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    """Tab-separated manifest; paths are written relative to the manifest directory when possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        return str(p.relative_to(base)) if p.is_relative_to(base) else str(p)

    with_pred = any(e.prediction is not None for e in entries)
    with path.open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS + (("prediction",) if with_pred else ()))
        for e in entries:
            row = [rel(e.input), rel(e.output), e.device, _format_controls(e.controls)]
            if with_pred:
                row.append(rel(e.prediction) if e.prediction is not None else "")
            w.writerow(row)


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    with path.open(newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    entries = []
    for i, r in enumerate(rows, start=2):
        missing = [k for k in MANIFEST_FIELDS if not r.get(k)]
        if missing:
            raise DataError(f"{path}:{i}: missing fields {missing}")
        pred = r.get("prediction") or None
        entries.append(ManifestEntry(base / r["input"], base / r["output"], r["device"],
                                     _parse_controls(r["controls"]), base / pred if pred else None))
    return entries
