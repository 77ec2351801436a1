"""Command-line interface: ``optocomp {train,process,eval,flops,synth-data}``.

Every command reads an optional flat ``key = value`` config file
(``--config``) and applies ``--override key=value`` on top. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data, metrics, train as training
from .cost import count_flops
from .errors import (
    ConfigurationError,
    ContractError,
    ControlError,
    DataError,
    NumericalError,
    StabilityError,
    WeightFileError,
)
from .model import ModelConfig, StreamState, load_weights, process_stream

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# key -> (type, default); None default means required
_SCHEMAS = {
    "train": {
        "manifest": (str, None), "architecture": (str, "s6"), "device": (str, "cl1b"),
        "max_epochs": (int, 200), "patience": (int, 30), "batch_size": (int, 2400), "lr0": (float, 3e-4),
        "decay": (float, 0.25), "clip_norm": (float, 1.0), "tbptt_window": (int, 1), "split": (float, 0.9),
        "trainable": (str, ""),
    },
    "process": {
        "weights": (str, None), "input": (str, None), "output": (str, None), "controls": (str, None),
        "chunk": (int, 4096), "backend": (str, ""), "encoding": (str, "float64"),
    },
    "eval": {"manifest": (str, None), "weights": (str, ""), "segment": (str, "all"), "split": (float, 0.9)},
    "flops": {"architecture": (str, "s6"), "device": (str, "cl1b")},
    "synth-data": {
        "source": (str, ""), "seconds": (float, 15.0), "grid": (str, "desk"), "encoding": (str, "float64"),
    },
}


def parse_config_text(text: str, origin: str = "config") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"{origin}:{i}: expected key = value")
        out[key.strip()] = val.strip()
    return out


def resolve_config(command: str, config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    schema = _SCHEMAS[command]
    raw: dict[str, str] = {}
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        raw.update(parse_config_text(p.read_text(), str(p)))
    for ov in overrides:
        key, sep, val = ov.partition("=")
        if not sep:
            raise ConfigurationError(f"override {ov!r} is not key=value")
        raw[key.strip()] = val.strip()
    unknown = sorted(set(raw) - set(schema) - {"seed"})
    if unknown:
        raise ConfigurationError(f"unknown {command} config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (typ, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = typ(raw[key])
            except ValueError as exc:
                raise ConfigurationError(f"{key}: cannot parse {raw[key]!r} as {typ.__name__}") from exc
        elif default is None:
            raise ConfigurationError(f"missing required config key {key!r}")
        else:
            cfg[key] = default
    cfg["seed"] = seed if seed is not None else int(raw.get("seed", 0))
    return cfg


def parse_controls(text: str) -> dict[str, float]:
    try:
        return data._parse_controls(text)
    except DataError as exc:
        raise ConfigurationError(str(exc)) from exc


def _parse_grid(text: str):
    if text == "desk":
        return list(data.DESK_GRID)
    grid = []
    for item in filter(None, text.split(";")):
        try:
            thr, ratio, att, rel = (float(v) for v in item.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"grid entry {item!r}: expected threshold_db,ratio,attack_ms,release_ms") from exc
        grid.append(data.OracleSettings(thr, ratio, att, rel))
    if not grid:
        raise ConfigurationError("empty settings grid")
    return grid


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict, out: Path) -> int:
    mcfg = ModelConfig(cfg["architecture"], cfg["device"], seed=cfg["seed"])
    tc = training.TrainConfig(
        max_epochs=cfg["max_epochs"], patience=min(cfg["patience"], cfg["max_epochs"]), batch_size=cfg["batch_size"],
        lr0=cfg["lr0"], decay=cfg["decay"], clip_norm=cfg["clip_norm"], tbptt_window=cfg["tbptt_window"],
        seed=cfg["seed"],
    )
    recordings = [e.load() for e in data.read_manifest(cfg["manifest"])]
    train_set, _ = data.split_train_test(recordings, cfg["split"])
    trainable = [s.strip() for s in cfg["trainable"].split(",") if s.strip()] or None
    res = training.train(mcfg, train_set, tc, trainable=trainable, checkpoint_dir=out)
    (out / "history.tsv").write_text(res.history_table())
    training.save_checkpoint(out, res.best, res.optimizer, tag="best")
    print(f"best epoch {res.best_epoch}: val loss {res.history[res.best_epoch].val_loss:.6e}")
    print(f"weights: {out / 'best.weights.json'}")
    return EXIT_OK


def cmd_process(cfg: dict, out: Path) -> int:
    w = load_weights(cfg["weights"])
    ctrl = data.normalize_controls(parse_controls(cfg["controls"]), w.config.device)
    x, rate = data.load_wav(cfg["input"])
    y = process_stream(w, StreamState(w.config), x, ctrl, chunk=cfg["chunk"], backend=cfg["backend"] or None)
    dest = Path(cfg["output"])
    if not dest.is_absolute():
        dest = out / dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    data.save_wav(dest, y, rate, cfg["encoding"])
    print(f"wrote {dest} ({y.size} samples)")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    entries = data.read_manifest(cfg["manifest"])
    w = load_weights(cfg["weights"]) if cfg["weights"] else None
    if cfg["segment"] not in ("all", "test"):
        raise ConfigurationError("segment must be 'all' or 'test'")
    report = metrics.MetricsReport()
    for e in entries:
        name = e.output.stem
        try:
            rec = e.load()
            if cfg["segment"] == "test":
                rec = data.split_train_test([rec], cfg["split"])[1][0]
            if w is not None:
                pred = training.stream_predictions(w, rec)
            elif e.prediction is not None:
                pred, _ = data.load_wav(e.prediction)
                if cfg["segment"] == "test":
                    pred = pred[-len(rec):]
            else:
                raise ConfigurationError("eval needs either weights or a prediction column in the manifest")
            report.add(name, rec.y, pred)
        except (DataError, ControlError, WeightFileError) as exc:
            report.failures[name] = str(exc)
    table = report.table()
    (out / "metrics.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK if report.rows else EXIT_DATA


def cmd_flops(cfg: dict, out: Path) -> int:
    rep = count_flops(ModelConfig(cfg["architecture"], cfg["device"]))
    print(rep.table())
    return EXIT_OK


def cmd_synth_data(cfg: dict, out: Path) -> int:
    grid = _parse_grid(cfg["grid"])
    if cfg["source"]:
        x, rate = data.load_wav(cfg["source"])
    else:
        x, rate = data.desk_source(cfg["seconds"], cfg["seed"]), data.SAMPLE_RATE
    out.mkdir(parents=True, exist_ok=True)
    src = out / "input.wav"
    data.save_wav(src, x, rate, cfg["encoding"])
    x, _ = data.load_wav(src)  # target is computed from the stored (possibly quantized) input
    entries = []
    for i, s in enumerate(grid):
        dest = out / f"target_{i:02d}.wav"
        data.save_wav(dest, data.synth_compressor(x, s, rate), rate, cfg["encoding"])
        entries.append(data.ManifestEntry(src, dest, "cl1b", s.cl1b_controls()))
    data.write_manifest(out / "manifest.tsv", entries)
    print(f"wrote {len(entries)} recordings and {out / 'manifest.tsv'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "process": cmd_process,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "synth-data": cmd_synth_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optocomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--override", action="append", default=[], metavar="K=V", help="override one config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args.config, args.override, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (ConfigurationError, ControlError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WeightFileError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, StabilityError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
