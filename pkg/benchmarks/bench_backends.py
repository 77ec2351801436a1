"""Throughput of the compiled streaming core against the numpy fallback.

    python benchmarks/bench_backends.py [--seconds 0.5] [--repeats 3]

Prints samples/s and the real-time factor at 48 kHz for every architecture.
"""

import argparse
import time

import numpy as np

from optocomp import backend
from optocomp.blocks import VARIANTS
from optocomp.model import ControlParams, ModelConfig, StreamState, build_model, process_stream

RATE = 48000


def throughput(w, x, ctrl, name, repeats):
    process_stream(w, StreamState(w.config), x[:256], ctrl, backend=name)  # builds and caches the processor
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        process_stream(w, StreamState(w.config), x, ctrl, backend=name)
        best = min(best, time.perf_counter() - t0)
    return x.size / best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=0.5, help="audio length per run")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    x = np.random.default_rng(0).standard_normal(int(args.seconds * RATE)) * 0.3
    ctrl = ControlParams("cl1b", [0.5, 0.5], [0.5, 0.5])
    print("arch\tbackend\tsamples_per_s\trealtime_factor")
    for arch in VARIANTS:
        w = build_model(ModelConfig(arch, "cl1b"), 0)
        rates = {}
        for name in backend.AVAILABLE:
            rates[name] = throughput(w, x, ctrl, name, args.repeats)
            print(f"{arch}\t{name}\t{rates[name]:,.0f}\t{rates[name] / RATE:.2f}")
        if len(rates) == 2:
            print(f"{arch}\tspeedup\t{rates['compiled'] / rates['python']:.1f}x\t")


if __name__ == "__main__":
    main()
