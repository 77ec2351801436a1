"""Objective error measures between a target ``y`` and a prediction ``y_hat``.

Time domain: MSE, MAE, ESR and the energy RMSE. Spectral: spectral flux
error and the multi-resolution STFT error. STFTs use a periodic Hann window,
hop = window / 4 and no padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SignalTooShortError, ZeroEnergyError

STFT_WINDOWS = (512, 1024, 2048)
SFE_WINDOW = 2048
COLUMNS = ("MSE", "MAE", "ESR", "RMSE", "SFE", "M-STFTE")


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ContractError(f"length mismatch: {y.size} vs {y_hat.size}")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def esr(y, y_hat) -> float:
    """Error-to-signal ratio sum((y - y_hat)^2) / sum(y^2)."""
    y, y_hat = _pair(y, y_hat)
    energy = float(np.sum(y * y))
    if energy == 0.0:
        raise ZeroEnergyError("ESR is undefined for a zero-energy target")
    return float(np.sum((y - y_hat) ** 2)) / energy


def rmse_energy(y, y_hat) -> float:
    """sqrt(|mean(y^2 - y_hat^2)|): deviation in mean energy."""
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.abs(np.mean(y * y - y_hat * y_hat))))


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames(length: int, window: int) -> int:
    return 0 if length < window else 1 + (length - window) // (window // 4)


def stft_magnitude(x, window: int) -> np.ndarray:
    """|STFT| with shape (frames, window // 2 + 1)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    frames = n_frames(x.size, window)
    if frames < 1:
        raise SignalTooShortError(f"signal of {x.size} samples is shorter than the {window}-sample window")
    hop = window // 4
    idx = np.arange(frames)[:, None] * hop + np.arange(window)[None, :]
    return np.abs(np.fft.rfft(x[idx] * hann(window), axis=-1))


def spectral_flux(mag: np.ndarray) -> np.ndarray:
    """Per-bin absolute change between consecutive magnitude frames."""
    return np.abs(np.diff(mag, axis=0))


def spectral_flux_error(y, y_hat, window: int = SFE_WINDOW) -> float:
    y, y_hat = _pair(y, y_hat)
    if n_frames(y.size, window) < 2:
        raise SignalTooShortError(f"spectral flux needs at least two {window}-sample frames")
    return float(np.sum(np.abs(spectral_flux(stft_magnitude(y, window)) - spectral_flux(stft_magnitude(y_hat, window)))))


def mstft_error(y, y_hat, windows=STFT_WINDOWS) -> float:
    """Mean over resolutions of L1(|S(y)| - |S(y_hat)|) / L1(|S(y)|)."""
    y, y_hat = _pair(y, y_hat)
    total = 0.0
    for w in windows:
        s = stft_magnitude(y, w)
        ref = float(np.sum(s))
        if ref == 0.0:
            raise ZeroEnergyError("M-STFT error is undefined for a zero-magnitude target")
        total += float(np.sum(np.abs(s - stft_magnitude(y_hat, w)))) / ref
    return total / len(windows)


def all_metrics(y, y_hat) -> dict[str, float]:
    return {
        "MSE": mse(y, y_hat),
        "MAE": mae(y, y_hat),
        "ESR": esr(y, y_hat),
        "RMSE": rmse_energy(y, y_hat),
        "SFE": spectral_flux_error(y, y_hat),
        "M-STFTE": mstft_error(y, y_hat),
    }


@dataclass
class MetricsReport:
    """Per-recording metric rows plus failures; the aggregate is the mean over successes."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, y, y_hat) -> None:
        try:
            self.rows[name] = all_metrics(y, y_hat)
        except (ContractError, ZeroEnergyError, SignalTooShortError) as exc:
            self.failures[name] = str(exc)

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {}
        return {c: float(np.mean([r[c] for r in self.rows.values()])) for c in COLUMNS}

    def table(self) -> str:
        lines = ["recording\t" + "\t".join(COLUMNS)]
        for name, r in self.rows.items():
            lines.append(name + "\t" + "\t".join(f"{r[c]:.6e}" for c in COLUMNS))
        agg = self.aggregate()
        if agg:
            lines.append("mean\t" + "\t".join(f"{agg[c]:.6e}" for c in COLUMNS))
        for name, msg in self.failures.items():
            lines.append(f"# failed {name}: {msg}")
        return "\n".join(lines) + "\n"
