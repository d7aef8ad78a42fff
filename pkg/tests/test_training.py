import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pesqdnn import tensor as T
from pesqdnn.errors import NonFiniteGradientError, ValidationError
from pesqdnn.losses import LossConfig, loss_utterance
from pesqdnn.model import PESQDNN, micro_config, toy_config
from pesqdnn.training import (AdamState, PlateauSchedule, TrainConfig, TrainItem, TrainState, _loss_and_grads,
                              adam_step, run_training, train_utterance)


def micro_items(n, seed=0, B=(1, 4)):
    rng = np.random.default_rng(seed)
    return [TrainItem(f"u{i}", rng.standard_normal((int(rng.integers(*B)), 8, 16, 2)), float(rng.uniform(1.5, 4.5)))
            for i in range(n)]


# --- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_weights_and_decays_moments():
    p = {"w": np.array([0.5, -1.0])}
    st_ = AdamState.zeros_like(p)
    st_.m["w"][:] = [0.2, 0.4]
    st_.v["w"][:] = [0.1, 0.3]
    out = adam_step(p, {"w": np.zeros(2)}, st_, 0.0)
    np.testing.assert_array_equal(out["w"], p["w"])
    np.testing.assert_allclose(st_.m["w"], [0.18, 0.36], rtol=1e-15)
    np.testing.assert_allclose(st_.v["w"], [0.0999, 0.2997], rtol=1e-15)


def test_adam_quadratic():
    p = {"w": np.array([1.0])}
    s = AdamState.zeros_like(p)
    for _ in range(200):
        p = adam_step(p, {"w": 2 * p["w"]}, s, 1e-2)
    assert abs(p["w"][0]) < 0.1


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    out = adam_step(p, {"w": np.array([1e-3, -5.0, 300.0])}, AdamState.zeros_like(p), 1e-3)
    np.testing.assert_allclose(out["w"] - 1.0, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_adam_non_finite_names_parameter():
    p = {"a": np.ones(2), "b": np.ones(2)}
    s = AdamState.zeros_like(p)
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, s, 1e-3)
    assert s.step == 0 and not np.any(s.m["a"])


def test_adam_shape_mismatch():
    p = {"a": np.ones(2)}
    with pytest.raises(ValidationError):
        adam_step(p, {"a": np.ones(3)}, AdamState.zeros_like(p), 1e-3)


# --- schedule --------------------------------------------------------------------

def schedule_oracle(losses, decay_patience=2, stop_patience=6, lr0=1e-4, factor=0.6):
    """Independent re-statement of the decided plateau rules."""
    best, since, plateau, decays = math.inf, 0, 0, 0
    out = []
    for e, loss in enumerate(losses):
        lr_used = lr0 * factor ** decays
        if loss < best:
            best, since, plateau = loss, 0, 0
            out.append((e, lr_used, "improved"))
            continue
        since += 1
        plateau += 1
        if since == stop_patience:
            out.append((e, lr_used, "stop"))
            return out
        if plateau == decay_patience:
            decays += 1
            plateau = 0
            out.append((e, lr_used, "decay"))
        else:
            out.append((e, lr_used, ""))
    return out


def test_three_flat_epochs_one_decay():
    s = PlateauSchedule()
    evs = [s.step(1.0) for _ in range(3)]
    assert [e.decayed for e in evs] == [False, False, True]
    assert s.decays == 1 and s.lr == pytest.approx(0.6e-4)


def test_six_flat_epochs_stop():
    s = PlateauSchedule()
    evs = [s.step(1.0) for _ in range(7)]
    assert evs[-1].stop and not evs[-1].decayed and s.stopped
    assert s.best_epoch == 0
    assert s.decays == 2  # after epochs 2 and 4, none on the stop epoch


def test_monotone_improvement_never_decays():
    s = PlateauSchedule()
    for k in range(50):
        ev = s.step(1.0 / (k + 1))
        assert ev.improved
    assert s.decays == 0 and not s.stopped


@given(st.lists(st.sampled_from([0.5, 0.6, 0.7, 0.8, 0.9, 1.0]), min_size=1, max_size=40))
def test_schedule_matches_oracle(losses):
    s = PlateauSchedule()
    got = []
    for e, loss in enumerate(losses):
        lr_used = s.lr
        ev = s.step(loss)
        tag = "improved" if ev.improved else "stop" if ev.stop else "decay" if ev.decayed else ""
        got.append((e, lr_used, tag))
        if ev.stop:
            break
    assert got == schedule_oracle(losses)


def test_run_training_follows_scripted_schedule():
    seq = [1.0, 0.9, 0.95, 0.92, 0.91, 0.8, 0.85, 0.85, 0.85, 0.85, 0.85, 0.85, 0.1]
    items = micro_items(2)
    m = PESQDNN(micro_config())
    snapshots = {}

    def dev(e, model, _train_loss):
        snapshots[e] = {k: v.copy() for k, v in model.weight_arrays().items()}
        return seq[e]

    res = run_training(m, items, [], TrainConfig(max_epochs=50), LossConfig("FLE"), dev_loss_fn=dev)
    expected = schedule_oracle(seq)
    assert [(h["epoch"], h["lr"]) for h in res.history] == [(e, lr) for e, lr, _ in expected]
    best_epoch = int(np.argmin(seq[:len(res.history)]))
    assert res.checkpoint.meta["best_epoch"] == best_epoch == 5
    for k, v in res.checkpoint.weights.items():
        np.testing.assert_array_equal(v, snapshots[best_epoch][k].astype(np.float32))
    lrs = [h["lr"] for h in res.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_max_epoch_cap():
    items = micro_items(2)
    res = run_training(PESQDNN(micro_config()), items, items, TrainConfig(max_epochs=3), LossConfig("FLE"))
    assert len(res.history) == 3
    best = [h["dev_loss"] for h in res.history]
    assert res.checkpoint.meta["best_dev_loss"] == min(best)


def test_empty_sets_rejected():
    items = micro_items(1)
    with pytest.raises(ValidationError):
        run_training(PESQDNN(micro_config()), items, [], TrainConfig(max_epochs=1))
    with pytest.raises(ValidationError):
        run_training(PESQDNN(micro_config()), [], items, TrainConfig(max_epochs=1))


def test_incompatible_loss_rejected():
    items = micro_items(1)
    with pytest.raises(ValidationError):
        run_training(PESQDNN(micro_config(embedding_mode="BLE")), items, items, TrainConfig(max_epochs=1),
                     LossConfig("FLE"))


# --- train_utterance -------------------------------------------------------------------

def test_single_utterance_descent():
    # at lr 1e-4 Adam's lr-sized first steps overshoot once around step 6
    cfg = toy_config(rng_seed=42)
    m = PESQDNN(cfg)
    st_ = TrainState.fresh(m, TrainConfig(lr=3e-5))
    x = np.random.default_rng(42).standard_normal((2, 260, 16, 2))
    losses = [train_utterance(st_, x, 3.5, LossConfig("FLE")) for _ in range(11)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_alpha_zero_matches_utterance_gradient():
    m = PESQDNN(micro_config())
    x = np.random.default_rng(1).standard_normal((3, 8, 16, 2))
    _, g_fle = _loss_and_grads(m, x, 2.7, LossConfig("FLE", alpha_override=0.0))
    m.zero_grad()
    with T.Tape() as tape:
        T.backward(loss_utterance(m.forward(x).pesq_hat, 2.7), tape)
    for k, w in m.weights.items():
        assert w.grad.tobytes() == g_fle[k].tobytes(), k


def test_zero_lr_leaves_weights_bit_identical():
    m = PESQDNN(micro_config())
    st_ = TrainState.fresh(m, TrainConfig(lr=0.0))
    before = {k: v.tobytes() for k, v in m.weight_arrays().items()}
    x = np.random.default_rng(2).standard_normal((2, 8, 16, 2))
    for _ in range(2):
        train_utterance(st_, x, 3.0, LossConfig("FLE"))
    assert {k: v.tobytes() for k, v in m.weight_arrays().items()} == before


def test_gradient_accumulation_runs():
    items = micro_items(5)
    res = run_training(PESQDNN(micro_config()), items, items[:2], TrainConfig(max_epochs=2, accumulate=2),
                       LossConfig("FLE"))
    assert res.state.adam.step == 2 * 3


# --- persistence and determinism ------------------------------------------------------

def test_train_state_roundtrip(tmp_path):
    items = micro_items(3)
    res = run_training(PESQDNN(micro_config()), items, items, TrainConfig(max_epochs=2), LossConfig("FLE"))
    res.state.save(tmp_path / "s.bin")
    back = TrainState.load(tmp_path / "s.bin")
    assert back.to_bytes() == res.state.to_bytes()
    assert back.rng.bit_generator.state == res.state.rng.bit_generator.state


def test_resume_equals_uninterrupted(tmp_path):
    items = micro_items(4, seed=3)
    dev = micro_items(2, seed=4)
    cfg3 = TrainConfig(max_epochs=3, seed=9)
    full = run_training(PESQDNN(micro_config()), items, dev, cfg3, LossConfig("FLE"))
    run_training(PESQDNN(micro_config()), items, dev, TrainConfig(max_epochs=2, seed=9), LossConfig("FLE"),
                 state_path=tmp_path / "s.bin")
    state = TrainState.load(tmp_path / "s.bin")
    resumed = run_training(state.model, items, dev, cfg3, LossConfig("FLE"), state=state)
    assert resumed.history == full.history
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()


def test_runs_are_byte_identical():
    items = micro_items(3, seed=5)
    a = run_training(PESQDNN(micro_config()), items, items, TrainConfig(max_epochs=2, seed=1), LossConfig("FLE"))
    b = run_training(PESQDNN(micro_config()), items, items, TrainConfig(max_epochs=2, seed=1), LossConfig("FLE"))
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()


@settings(max_examples=10)
@given(st.lists(st.floats(0.1, 2.0), min_size=2, max_size=12))
def test_best_dev_loss_non_increasing(seq):
    items = micro_items(1)
    res = run_training(PESQDNN(micro_config()), items, [], TrainConfig(max_epochs=len(seq)), LossConfig("FLE"),
                       dev_loss_fn=lambda e, m, tl: seq[e])
    running = np.minimum.accumulate([h["dev_loss"] for h in res.history])
    assert res.checkpoint.meta["best_dev_loss"] == running[-1]
