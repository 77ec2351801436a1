"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""

import time

import numpy as np
import pytest

from optocomp import backend, cost, data, layers as L, metrics, train
from optocomp.blocks import VARIANTS
from optocomp.model import ControlParams, ModelConfig, StreamState, build_model, count_params, latency_ms, \
    algorithmic_latency, process_stream

import gradcheck_cases as G
import oracles

DRAWS = 100
TOL = 1e-4


def test_criterion_1_gradients(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for case in G.LAYER_CASES + G.BLOCK_CASES + G.COND_CASES:
        worst[case.__name__] = max(G.check(case, rng) for _ in range(DRAWS))
    worst["full_s6_model_8_steps"] = max(G.check_full_model(rng) for _ in range(DRAWS))
    for window in (1, 4, 8):
        worst[f"tbptt_window_{window}"] = max(G.check_window(rng, window) for _ in range(2))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < TOL and elapsed < 300
    acceptance(1, ok, f"{len(worst)} checks x {DRAWS} draws, max rel err {worst[top]:.2e} ({top}), {elapsed:.0f} s")
    assert ok, worst


def test_criterion_2_scan_oracles(acceptance):
    rng = np.random.default_rng(7)
    js = rng.standard_normal((1024, 3))
    raw = G._s4d_params(rng, 3, 4)
    p = L.S4dParams(**raw)
    s, disc, out4 = L.s4d_state(3, 4), L.s4d_discretize(p), []
    for j in js:
        y, s = L.s4d_step(p, s, j, disc)
        out4.append(y)
    err4 = np.max(np.abs(np.array(out4) - oracles.s4d_sequence(raw, js)[0]))
    raw = G._s6_params(rng, 3, 4)
    p = L.S6Params(**raw)
    s, out6 = L.s6_state(3, 4), []
    for j in js:
        y, s = L.s6_step(p, s, j)
        out6.append(y)
    err6 = np.max(np.abs(np.array(out6) - oracles.s6_sequence(raw, js)[0]))
    ok = err4 < 1e-12 and err6 < 1e-12
    acceptance(2, ok, f"length 1024: s4d max abs err {err4:.1e}, s6 {err6:.1e}")
    assert ok


def test_criterion_3_chunk_invariance(acceptance):
    x = np.random.default_rng(3).standard_normal(48000) * 0.3
    ctrl = ControlParams("cl1b", [0.5, 0.5], [0.2, 0.8])
    same = {}
    for arch in VARIANTS:
        w = build_model(ModelConfig(arch), 11)
        outs = [process_stream(w, StreamState(w.config), x, ctrl, chunk=c) for c in (1, 64, 4096)]
        same[arch] = all(np.array_equal(outs[0], o) for o in outs[1:])
    ok = all(same.values())
    acceptance(3, ok, "bitwise identical for chunks 1/64/4096: " + ", ".join(f"{a}={v}" for a, v in same.items()))
    assert ok


DESK_EPOCHS = 8


@pytest.mark.slow
def test_criterion_4_desk_training(acceptance):
    t0 = time.perf_counter()
    recordings = data.desk_dataset(seconds_per_setting=15.0, seed=0)
    train_set, test_set = data.split_train_test(recordings, 0.9)
    y = np.concatenate([r.y for r in test_set])
    bypass = metrics.esr(y, np.concatenate([r.x for r in test_set]))
    results = {}
    for arch in VARIANTS:
        tc = train.TrainConfig(max_epochs=DESK_EPOCHS, patience=DESK_EPOCHS, batch_size=2400, lr0=3e-4, seed=0)
        res = train.train(ModelConfig(arch, "cl1b"), train_set, tc)
        pred = np.concatenate([train.stream_predictions(res.best, r) for r in test_set])
        results[arch] = (metrics.esr(y, pred), metrics.mse(y, pred))
    elapsed = time.perf_counter() - t0
    best_mse = min(m for _, m in results.values())
    ok = (all(e <= 0.1 for e, _ in results.values()) and results["s6"][1] <= 2 * best_mse and elapsed <= 3600)
    detail = ", ".join(f"{a} ESR {e:.4f} MSE {m:.2e}" for a, (e, m) in results.items())
    acceptance(4, ok, f"{detail}; bypass ESR {bypass:.4f}; s6/best MSE {results['s6'][1] / best_mse:.2f}; "
                      f"{DESK_EPOCHS} epochs, {elapsed:.0f} s")
    assert ok, results


def test_criterion_5_cost_accounting(acceptance):
    exact = cost.dense_flops(64, 2) == 258 and cost.dense_params(64, 2) == 130
    exact &= all(cost.count_flops(ModelConfig(a, d)).params == count_params(build_model(ModelConfig(a, d)))
                 for a in VARIANTS for d in ("cl1b", "la2a"))
    ratios = []
    printed = True
    for d in ("la2a", "cl1b"):
        rep = cost.count_flops(ModelConfig("s6", d))
        ref_f, ref_p = rep.reference()
        ratios += [rep.flops / ref_f, rep.params / ref_p]
        table = rep.table()
        printed &= f"network_total\t{rep.flops}\t{rep.params}" in table and f"reference\t{ref_f}\t{ref_p}" in table
    within = all(0.5 <= r <= 2.0 for r in ratios)
    ok = exact and within and printed
    acceptance(5, ok, "s6 la2a/cl1b flops and params ratios to reference: " + ", ".join(f"{r:.2f}" for r in ratios))
    assert ok


def test_criterion_6_metric_closed_forms(acceptance):
    y = np.random.default_rng(6).standard_normal(48000) * 0.3
    e_esr = abs(metrics.esr(y, 0.8 * y) - 0.04)
    e_stft = abs(metrics.mstft_error(y, 0.5 * y) - 0.5)
    zeros = all(v == 0.0 for v in metrics.all_metrics(y, y).values())
    p = np.tanh(2 * y) / 2
    worst = 0.0
    for w in metrics.STFT_WINDOWS:
        worst = max(worst, float(np.max(np.abs(metrics.stft_magnitude(y, w) - oracles.naive_stft_mag(y.tolist(), w)))))
    ref_sfe = np.sum(np.abs(np.abs(np.diff(oracles.naive_stft_mag(y.tolist(), 2048), axis=0))
                            - np.abs(np.diff(oracles.naive_stft_mag(p.tolist(), 2048), axis=0))))
    e_sfe = abs(metrics.spectral_flux_error(y, p) - ref_sfe)
    ok = e_esr <= 1e-10 and e_stft <= 1e-6 and zeros and worst < 1e-8 and e_sfe < 1e-8 * max(1.0, ref_sfe)
    acceptance(6, ok, f"|esr-0.04| {e_esr:.1e}, |mstft-0.5| {e_stft:.1e}, zero on identical {zeros}, "
                      f"stft vs naive DFT {worst:.1e}, sfe vs naive {e_sfe:.1e}")
    assert ok


def test_criterion_7_latency_and_throughput(acceptance):
    cfg = ModelConfig("s6", "cl1b")
    w = build_model(cfg, 0)
    ctrl = ControlParams("cl1b", [0.5, 0.5], [0.5, 0.5])
    x = np.random.default_rng(0).standard_normal(96000) * 0.3
    process_stream(w, StreamState(cfg), x[:4096], ctrl)  # warm-up
    t0 = time.perf_counter()
    process_stream(w, StreamState(cfg), x, ctrl)
    rate = x.size / (time.perf_counter() - t0)
    ok = algorithmic_latency(cfg) == 64 and abs(latency_ms(cfg) - 4 / 3) < 1e-12 and rate > 48000
    acceptance(7, ok, f"latency {algorithmic_latency(cfg)} samples = {latency_ms(cfg):.3f} ms; "
                      f"{rate:,.0f} samples/s on the {backend.DEFAULT} backend")
    assert ok


def test_criterion_8_training_protocol(acceptance):
    lrs = [train.lr_schedule(e) for e in range(4)]
    lr_ok = all(abs(lr - 0.25**e * 3e-4) <= 1e-20 for e, lr in enumerate(lrs))
    vals = [4.0, 3.0, 2.0, 1.0] + [2.0 + 0.1 * k for k in range(100)]  # diverges after epoch 3
    x = data.desk_source(0.02, seed=1)
    rec = data.Recording(x, 0.5 * x, "cl1b", {"threshold": -20.0, "ratio": 4.0, "attack": 5.0, "release": 0.1})
    res = train.train(ModelConfig("s4d"), [rec], train.TrainConfig(max_epochs=100, patience=30, batch_size=8),
                      validator=lambda w, e: vals[e])
    stop_ok = res.stopped_early and res.best_epoch == 3 and res.history[-1].epoch == 33
    b = data.make_batches([rec], batch_size=8).batch(0)
    rows_ok = b.windows.shape[1:] == (1, 64) and b.targets.shape[1:] == (1,)
    ok = lr_ok and stop_ok and rows_ok
    acceptance(8, ok, f"lr {['%.4e' % v for v in lrs]}; best epoch {res.best_epoch}, stopped at "
                      f"{res.history[-1].epoch}; row shape {b.windows.shape[1:]} -> {b.targets.shape[1:]}")
    assert ok


@pytest.mark.skip(reason="needs the published hardware datasets and multi-day training")
def test_criterion_9_published_datasets():
    pass
