import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from optocomp import autodiff as ad
from optocomp import data, train
from optocomp.errors import ConfigurationError, DataError, NumericalError
from optocomp.model import ModelConfig, _template, build_model, load_weights, zero_core_state

CL1B = {"threshold": -20.0, "ratio": 4.0, "attack": 5.0, "release": 0.1}


def _rec(seconds=0.25, seed=3, gain=0.5):
    x = data.desk_source(seconds, seed=seed)
    return data.Recording(x, gain * x, "cl1b", CL1B, name=f"r{seed}")


def test_learning_rate_schedule():
    assert [train.lr_schedule(e) for e in range(4)] == [3e-4, 7.5e-5, 1.875e-5, 4.6875e-6]
    with pytest.raises(ConfigurationError):
        train.lr_schedule(-1)


def test_clip_example():
    g = {"a": np.array([3.0, 4.0])}
    c = train.clip_by_global_norm(g, 1.0)
    assert np.allclose(c["a"], [0.6, 0.8], rtol=0, atol=1e-15)
    assert train.clip_by_global_norm({"a": np.array([0.3, 0.4])})["a"].tolist() == [0.3, 0.4]


@given(arrays(np.float64, 6, elements=st.floats(-100, 100)).filter(lambda a: np.linalg.norm(a) > 1e-3))
def test_clip_preserves_direction(a):
    grads = {"x": a[:4], "y": a[4:]}
    c = train.clip_by_global_norm(grads, 1.0)
    flat = np.concatenate([c["x"], c["y"]])
    assert train.global_norm(c) <= 1.0 + 1e-12
    cos = flat @ a / (np.linalg.norm(flat) * np.linalg.norm(a))
    assert abs(cos - 1.0) < 1e-12


def test_adam_first_step_is_minus_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = train.OptimizerState.create(p)
    out = train.adam_step(opt, p, {"w": np.array([0.3, -7.0, 1e-3])}, lr=0.01)
    assert np.allclose(out["w"] - p["w"], [-0.01, 0.01, -0.01], rtol=1e-5, atol=0)


def test_adam_two_step_hand_values():
    p = {"w": np.array([1.0])}
    opt = train.OptimizerState.create(p)
    p = train.adam_step(opt, p, {"w": np.array([0.5])}, lr=0.1)
    p = train.adam_step(opt, p, {"w": np.array([-1.0])}, lr=0.1)
    # m2 = -0.055, v2 = 0.00124975, corrections 0.19 and 0.001999
    m_hat = -0.055 / 0.19
    v_hat = 0.00124975 / 0.001999
    first = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert abs(p["w"][0] - (first - 0.1 * m_hat / (v_hat**0.5 + 1e-8))) < 1e-12
    assert opt.step == 2


def test_optimizer_json_round_trip():
    p = {"w": np.arange(6.0).reshape(2, 3)}
    opt = train.OptimizerState.create(p)
    train.adam_step(opt, p, {"w": np.ones((2, 3))}, 0.1)
    back = train.OptimizerState.from_json(json.loads(json.dumps(opt.to_json())))
    assert back.step == 1 and np.array_equal(back.m["w"], opt.m["w"]) and np.array_equal(back.v["w"], opt.v["w"])


def test_early_stopping_counts_non_improving_epochs():
    s = train.EarlyStopping(30)
    losses = [4.0, 3.0, 2.0, 1.0] + [1.0] * 100
    stop_at = next(e for e, v in enumerate(losses) if s.update(e, v))
    assert stop_at == 33 and s.best_epoch == 3


def test_train_stops_at_epoch_33():
    vals = [4.0, 3.0, 2.0, 1.0] + [1.5] * 100
    tc = train.TrainConfig(max_epochs=100, patience=30, batch_size=8, lr0=1e-4)
    res = train.train(ModelConfig("s4d"), [_rec(0.02)], tc, validator=lambda w, e: vals[e])
    assert res.stopped_early and res.best_epoch == 3 and res.history[-1].epoch == 33
    assert [round(h.lr / 1e-4, 12) for h in res.history[:3]] == [1.0, 0.25, 0.0625]


def test_batch_rows_hold_64_inputs_and_one_target():
    plan = data.make_batches([_rec(0.1)], batch_size=16)
    b = plan.batch(0)
    assert b.windows.shape == (16, 1, 64) and b.targets.shape == (16, 1)
    assert np.array_equal(b.inputs, b.windows[..., -1])


def test_convex_sanity_output_layer_only():
    res = train.train(ModelConfig("s6"), [_rec(1.0)],
                      train.TrainConfig(max_epochs=2, patience=2, batch_size=64, lr0=1e-2), trainable=["out_fc"])
    assert min(h.val_loss for h in res.history) < 1e-8
    init = build_model(ModelConfig("s6"), 0)
    frozen = [k for k in init.tensors if not k.startswith("out_fc.")]
    assert all(np.array_equal(init.tensors[k], res.best.tensors[k]) for k in frozen)


def test_training_is_deterministic(tmp_path):
    tc = train.TrainConfig(max_epochs=2, patience=2, batch_size=16, lr0=1e-3, seed=4)
    a = train.train(ModelConfig("lstm"), [_rec(0.05)], tc, checkpoint_dir=tmp_path)
    b = train.train(ModelConfig("lstm"), [_rec(0.05)], tc)
    assert all(np.array_equal(a.best.tensors[k], b.best.tensors[k]) for k in a.best.tensors)
    assert a.history_table().split("\n")[1].split("\t")[:3] == b.history_table().split("\n")[1].split("\t")[:3]
    saved = load_weights(tmp_path / "best.weights.json")
    assert all(np.array_equal(saved.tensors[k], a.best.tensors[k]) for k in saved.tensors)
    assert json.loads((tmp_path / "best.optimizer.json").read_text())["step"] > 0


def test_returned_state_is_detached():
    cfg = ModelConfig("s6")
    w = build_model(cfg, 1)
    batch = data.make_batches([_rec(0.05)], batch_size=4).batch(0)
    _, grads, state = train.loss_and_grad(cfg, dict(w.tensors), zero_core_state(_template(cfg), (4,)), batch)
    leaves = [v for v in ad_leaves(state)]
    assert leaves and all(isinstance(v, np.ndarray) for v in leaves)
    assert set(grads) == set(w.tensors)


def ad_leaves(tree):
    from optocomp.model import flatten

    return flatten(tree).values()


def test_window_losses_add_up():
    # a window of 4 steps equals four windows of 1 with carried state
    cfg = ModelConfig("s4d")
    w = build_model(cfg, 2)
    rec = _rec(0.05)
    p4 = data.make_batches([rec], batch_size=4, tbptt_window=4)
    p1 = data.make_batches([rec], batch_size=4, tbptt_window=1)
    s4 = s1 = zero_core_state(_template(cfg), (4,))
    l4, s4 = train.sequence_loss(cfg, w.tensors, s4, p4.batch(0))
    l1 = 0.0
    for t in range(4):
        v, s1 = train.sequence_loss(cfg, w.tensors, s1, p1.batch(t))
        l1 += float(v) / 4
    assert abs(float(l4) - l1) < 1e-15 * max(1.0, l1) * 10


def test_errors():
    with pytest.raises(ConfigurationError):
        train.TrainConfig(max_epochs=5, patience=10)
    with pytest.raises(ConfigurationError):
        train.TrainConfig(lr0=0)
    with pytest.raises(DataError):
        train.train(ModelConfig("s6"), [])
    la = data.Recording(np.ones(100), np.ones(100), "la2a", {"peak_reduction": 10, "switch": 0})
    with pytest.raises(DataError):
        train.train(ModelConfig("s6"), [la])
    with pytest.raises(ConfigurationError):
        train.train(ModelConfig("s6"), [_rec(0.02)], train.TrainConfig(max_epochs=1, patience=1, batch_size=4),
                    trainable=["nothing"])
    with pytest.raises(NumericalError):
        train.train(ModelConfig("s6"), [_rec(0.02)], train.TrainConfig(max_epochs=1, patience=1, batch_size=4),
                    validator=lambda w, e: float("nan"))


def test_finite_difference_of_quadratic():
    g = train.finite_difference(lambda p: float(np.sum(p["a"] ** 2)), {"a": np.array([1.0, -3.0])})
    assert np.allclose(g["a"], [2.0, -6.0], rtol=1e-9)
    assert train.relative_error(1e-9, 0.0) < 1e-2  # tiny values are compared against the floor
