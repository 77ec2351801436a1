"""Training: MSE on the predicted sample, Adam with global-norm clipping,
per-epoch exponential learning-rate decay, stateful truncated BPTT and early
stopping on a held-out validation slice.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .blocks import block_discretization
from .data import BatchPlan, ExampleBatch, Recording, carve_validation, make_batches
from .errors import ConfigurationError, DataError, NumericalError
from .kernels import rfft_magnitude
from .model import (
    ModelConfig,
    StreamState,
    WeightStore,
    _template,
    build_model,
    model_step,
    process_stream,
    save_weights,
    tree_map,
    unflatten,
    zero_core_state,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 30
    batch_size: int = 2400
    lr0: float = 3e-4
    decay: float = 0.25
    clip_norm: float = 1.0
    tbptt_window: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("max_epochs", "patience", "batch_size", "tbptt_window"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience must not exceed max_epochs")
        if not (self.lr0 > 0 and self.decay > 0 and self.clip_norm > 0):
            raise ConfigurationError("lr0, decay and clip_norm must be positive")


def lr_schedule(epoch: int, lr0: float = 3e-4, decay: float = 0.25) -> float:
    """lr0 * decay**epoch."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    return lr0 * decay**epoch


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()},
                   0, beta1, beta2, eps)

    def to_json(self) -> dict:
        enc = lambda d: {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in d.items()}  # noqa: E731
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": enc(self.m), "v": enc(self.v)}

    @classmethod
    def from_json(cls, doc: dict) -> "OptimizerState":
        dec = lambda d: {k: np.array(t["data"], dtype=np.float64).reshape(t["shape"]) for k, t in d.items()}  # noqa: E731
        return cls(dec(doc["m"]), dec(doc["v"]), int(doc["step"]), doc["beta1"], doc["beta2"], doc["eps"])


def adam_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """Bias-corrected Adam update; advances ``opt`` in place and returns new parameters."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * g * g
        out[k] = p - lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
    return out


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch's validation loss; True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ------------------------------------------------------------ batch losses


def tape_params(tape: ad.Tape, tensors: dict[str, np.ndarray], trainable: Sequence[str]):
    """Parameter tree with the ``trainable`` tensors registered on ``tape``."""
    train = set(trainable)
    return {k: (tape.param(k, v) if k in train else v) for k, v in tensors.items()}


def sequence_loss(cfg: ModelConfig, leaves: dict, state, batch: ExampleBatch):
    """Mean squared error of g * x_n over a (B, L) batch, starting from ``state``.

    ``leaves`` maps tensor names to arrays or tape variables. Returns the
    loss and the final state with every leaf detached from the tape.
    """
    params = unflatten(_template(cfg), leaves)
    discs = (block_discretization(params.block1), block_discretization(params.block2))
    L = batch.windows.shape[1]
    total = 0.0
    for t in range(L):
        w = batch.windows[:, t, :]
        g, state = model_step(params, state, w, rfft_magnitude(w, cfg.fft_size), batch.p_co, batch.p_ti, discs)
        err = g * w[:, -1] - batch.targets[:, t]
        total = total + ad.sum(err * err)
    loss = total * (1.0 / (batch.windows.shape[0] * L))
    return loss, tree_map(ad.detach, state)


def loss_and_grad(cfg: ModelConfig, tensors: dict[str, np.ndarray], state, batch: ExampleBatch,
                  trainable: Sequence[str] | None = None):
    """(loss, gradients by name, detached final state) for one batch."""
    tape = ad.Tape()
    names = list(tensors) if trainable is None else list(trainable)
    loss, new_state = sequence_loss(cfg, tape_params(tape, tensors, names), state, batch)
    return float(ad.value(loss)), tape.grad(loss), new_state


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float = 0.0


@dataclass
class TrainResult:
    best: WeightStore
    history: list[EpochRecord]
    best_epoch: int
    optimizer: OptimizerState
    stopped_early: bool = False

    def history_table(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tlr"]
        lines += [f"{r.epoch}\t{r.train_loss:.10e}\t{r.val_loss:.10e}\t{r.lr:.6e}" for r in self.history]
        return "\n".join(lines) + "\n"


def stream_predictions(w: WeightStore, rec: Recording, backend: str | None = None) -> np.ndarray:
    """Model output for a whole recording, streamed from a zero state."""
    return process_stream(w, StreamState(w.config), rec.x, rec.ctrl, backend=backend)


def validation_loss(w: WeightStore, recordings: Sequence[Recording], backend: str | None = None) -> float:
    """Pooled MSE of the streamed model over the validation recordings."""
    err = sum(float(np.sum((stream_predictions(w, r, backend) - r.y) ** 2)) for r in recordings)
    return err / sum(len(r) for r in recordings)


def _select(names: Sequence[str], patterns: Optional[Sequence[str]]) -> list[str]:
    if not patterns:
        return list(names)
    chosen = [n for n in names if any(n == p or n.startswith(p + ".") for p in patterns)]
    if not chosen:
        raise ConfigurationError(f"no parameters match {list(patterns)}")
    return chosen


def save_checkpoint(directory, w: WeightStore, opt: OptimizerState, tag: str = "best") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(w, d / f"{tag}.weights.json")
    (d / f"{tag}.optimizer.json").write_text(json.dumps(opt.to_json()) + "\n")
    return d / f"{tag}.weights.json"


def train(
    cfg: ModelConfig,
    recordings: Sequence[Recording],
    tc: TrainConfig = TrainConfig(),
    init: WeightStore | None = None,
    trainable: Optional[Sequence[str]] = None,
    validator: Optional[Callable[[WeightStore, int], float]] = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Fit ``cfg`` to the training recordings; returns the best-validation weights.

    The last 10% of every recording is held out for validation. ``trainable``
    restricts updates to tensors whose dotted names match the given prefixes.
    ``validator(weights, epoch)`` replaces the validation loss when given.
    """
    if not recordings:
        raise DataError("empty training set")
    for r in recordings:
        if r.device != cfg.device:
            raise DataError(f"{r.name}: device {r.device} does not match model device {cfg.device}")
    fit, val = carve_validation(recordings)
    plan: BatchPlan = make_batches(fit, tc.batch_size, tc.seed, cfg.buffer_len, tc.tbptt_window)

    w = init if init is not None else build_model(cfg, tc.seed)
    tensors = {k: np.array(v) for k, v in w.tensors.items()}
    names = _select(list(tensors), trainable)
    opt = OptimizerState.create({k: tensors[k] for k in names}, tc.beta1, tc.beta2, tc.eps)
    stopper = EarlyStopping(tc.patience)
    history: list[EpochRecord] = []
    best = w
    stopped = False
    template = _template(cfg)

    for epoch in range(tc.max_epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, tc.lr0, tc.decay)
        state = None
        losses = []
        for batch in plan:
            if batch.reset or state is None:
                state = zero_core_state(template, batch=(tc.batch_size,))
            loss, grads, state = loss_and_grad(cfg, tensors, state, batch, names)
            if not np.isfinite(loss) or not np.isfinite(global_norm(grads)):
                raise NumericalError(f"non-finite loss/gradient at epoch {epoch}, batch step {batch.step}")
            grads = clip_by_global_norm(grads, tc.clip_norm)
            tensors.update(adam_step(opt, {k: tensors[k] for k in names}, grads, lr))
            losses.append(loss)
        current = WeightStore(cfg, dict(tensors))
        v = validator(current, epoch) if validator is not None else validation_loss(current, val)
        if not np.isfinite(v):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, float(np.mean(losses)), float(v), lr, time.perf_counter() - t0)
        history.append(rec)
        stop = stopper.update(epoch, v)
        if stopper.best_epoch == epoch:
            best = current
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, best, opt)
        log.info("epoch %d train %.4e val %.4e lr %.3e (%.1fs)", epoch, rec.train_loss, v, lr, rec.seconds)
        if stop:
            stopped = True
            break
    return TrainResult(best, history, stopper.best_epoch, opt, stopped)


# -------------------------------------------------------- gradient checking


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference(f: Callable[[dict], float], params: dict[str, np.ndarray], h: float = 1e-5,
                      names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f`` for every entry of the named arrays."""
    out = {}
    for k in names if names is not None else list(params):
        base = params[k]
        g = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            p = np.array(base)
            p[i] = base[i] + h
            up = f({**params, k: p})
            p[i] = base[i] - h
            down = f({**params, k: p})
            g[i] = (up - down) / (2.0 * h)
        out[k] = g
    return out


__all__ = [
    "TrainConfig",
    "lr_schedule",
    "clip_by_global_norm",
    "global_norm",
    "OptimizerState",
    "adam_step",
    "EarlyStopping",
    "sequence_loss",
    "loss_and_grad",
    "train",
    "TrainResult",
    "EpochRecord",
    "validation_loss",
    "stream_predictions",
    "save_checkpoint",
    "finite_difference",
    "relative_error",
]
