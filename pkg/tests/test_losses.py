import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from pesqdnn import tensor as T
from pesqdnn.errors import DimensionError, ValidationError
from pesqdnn.losses import (LossConfig, alpha, check_compatible, compute_loss, loss_ble, loss_fle,
                            loss_utterance, max_loss, parse_loss_kind)

pesq = st.floats(1.04, 4.64)


def brute_force(pesq_hat, q, pesq_u, a):
    total = 0.0
    q = np.atleast_2d(q)
    for row in q:
        for v in row:
            total += (v - pesq_u) ** 2
    return (pesq_hat - pesq_u) ** 2 + a * total / q.size


def test_alpha_examples():
    assert alpha(4.64) == 1.0
    assert alpha(3.64) == 0.9
    assert alpha(1.04) == pytest.approx(0.9 ** 3.6, rel=1e-15)
    assert alpha(1.04) == pytest.approx(math.exp(3.6 * math.log(0.9)), rel=1e-14)


def test_alpha_rejects_out_of_range():
    with pytest.raises(ValidationError):
        alpha(0.9)
    with pytest.raises(ValidationError):
        alpha(4.7)


@given(pesq, pesq)
def test_alpha_monotone_in_unit_interval(a, b):
    assert 0.0 < alpha(a) <= 1.0
    if a < b:
        assert alpha(a) <= alpha(b)


def test_utterance_loss_examples():
    assert float(loss_utterance(T.Tensor([3.0]), 3.0).data) == 0.0
    assert float(loss_utterance(T.Tensor([4.0]), 3.0).data) == 1.0


def test_utterance_loss_gradient():
    p = T.Tensor(np.array([3.7]), requires_grad=True)
    with T.Tape() as tape:
        T.backward(loss_utterance(p, 2.5), tape)
    assert p.grad[0] == pytest.approx(2 * (3.7 - 2.5), rel=1e-14)
    h = 1e-5
    fd = ((3.7 + h - 2.5) ** 2 - (3.7 - h - 2.5) ** 2) / (2 * h)
    assert p.grad[0] == pytest.approx(fd, rel=1e-8)


def test_fle_hand_example():
    q = np.array([[3.0, 3.0], [4.0, 4.0]])
    got = float(loss_fle(T.Tensor([3.64]), T.Tensor(q), 3.64).data)
    expected = 0.9 * ((0.64 ** 2 * 2 + 0.36 ** 2 * 2) / 4)
    assert got == pytest.approx(expected, rel=1e-14)
    assert got == pytest.approx(brute_force(3.64, q, 3.64, 0.9), rel=1e-14)


def test_fle_zero_when_everything_matches():
    assert float(loss_fle(T.Tensor([2.5]), T.Tensor(np.full((3, 16), 2.5)), 2.5).data) == 0.0


def test_ble_single_block_zero():
    assert float(loss_ble(T.Tensor([2.0]), T.Tensor([[2.0]]), 2.0).data) == 0.0


def test_ble_equals_fle_with_unit_width(rng):
    q = rng.uniform(1.04, 4.64, (5, 1))
    a = loss_ble(T.Tensor([3.1]), T.Tensor(q), 2.2).data
    b = loss_fle(T.Tensor([3.1]), T.Tensor(q), 2.2).data
    assert a.tobytes() == b.tobytes()


def test_ble_rejects_wide_scores():
    with pytest.raises(DimensionError):
        loss_ble(T.Tensor([3.0]), T.Tensor(np.ones((2, 16)) * 3), 3.0)


def test_empty_scores_rejected():
    with pytest.raises(DimensionError):
        loss_fle(T.Tensor([3.0]), T.Tensor(np.zeros((0, 16))), 3.0)


def test_alpha_zero_hook_reduces_to_utterance_loss(rng):
    for _ in range(20):
        p, u = rng.uniform(1.04, 4.64, 2)
        q = rng.uniform(1.04, 4.64, (int(rng.integers(1, 9)), 16))
        base = loss_utterance(T.Tensor([p]), u).data
        assert loss_fle(T.Tensor([p]), T.Tensor(q), u, alpha_override=0.0).data.tobytes() == base.tobytes()
        assert loss_ble(T.Tensor([p]), T.Tensor(q[:, :1]), u, alpha_override=0.0).data.tobytes() == base.tobytes()


def test_random_losses_match_brute_force(rng):
    for _ in range(50):
        p, u = rng.uniform(1.04, 4.64, 2)
        B = int(rng.integers(1, 12))
        q = rng.uniform(1.04, 4.64, (B, 16))
        assert float(loss_fle(T.Tensor([p]), T.Tensor(q), u).data) == pytest.approx(
            brute_force(p, q, u, alpha(u)), rel=0, abs=1e-12)
        q1 = q[:, :1]
        assert float(loss_ble(T.Tensor([p]), T.Tensor(q1), u).data) == pytest.approx(
            brute_force(p, q1, u, alpha(u)), rel=0, abs=1e-12)


@given(pesq, pesq, hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(16)), elements=pesq))
def test_fle_dominates_utterance_loss(p, u, q):
    base = float(loss_utterance(T.Tensor([p]), u).data)
    full = float(loss_fle(T.Tensor([p]), T.Tensor(q), u).data)
    assert full >= base
    if np.all(q == u):
        assert full == base
    assert full <= max_loss("fle") + 1e-12


def test_score_gradient(rng):
    q = T.Tensor(rng.uniform(1.04, 4.64, (3, 16)), requires_grad=True)
    with T.Tape() as tape:
        T.backward(loss_fle(T.Tensor([3.0]), q, 2.0), tape)
    np.testing.assert_allclose(q.grad, alpha(2.0) * 2 * (q.data - 2.0) / q.size, rtol=1e-14)


def test_compute_loss_dispatch():
    cfg = LossConfig("utt")
    assert cfg.kind == "UTTERANCE"
    assert float(compute_loss(cfg, T.Tensor([3.0]), None, 2.0).data) == 1.0
    with pytest.raises(ValidationError):
        compute_loss(LossConfig("FLE"), T.Tensor([3.0]), None, 2.0)


def test_parse_and_compatibility():
    assert parse_loss_kind("ble") == "BLE"
    with pytest.raises(ValidationError):
        parse_loss_kind("mse")
    check_compatible("fle", "FLE")
    with pytest.raises(ValidationError):
        check_compatible("fle", "BLE")
    with pytest.raises(ValidationError):
        LossConfig(pesq_max=5.0)
