"""Utterance, frame-level and block-level PESQ training losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .model import PESQ_MAX, PESQ_MIN

LOSS_KINDS = ("UTTERANCE", "FLE", "BLE")
_ALIASES = {"UTT": "UTTERANCE", "UTTERANCE": "UTTERANCE", "FLE": "FLE", "BLE": "BLE"}


def parse_loss_kind(name: str) -> str:
    try:
        return _ALIASES[name.upper()]
    except KeyError:
        raise ValidationError(f"unknown loss kind {name!r}; expected one of utt, fle, ble") from None


@dataclass(frozen=True)
class LossConfig:
    kind: str = "FLE"
    pesq_max: float = PESQ_MAX
    alpha_base: float = 0.9
    alpha_override: float | None = None  # test hook: force alpha_u

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_loss_kind(self.kind))
        if self.pesq_max != PESQ_MAX:
            raise ValidationError("pesq_max is fixed at 4.64")
        if not 0.0 < self.alpha_base < 1.0:
            raise ValidationError("alpha_base must lie in (0, 1)")


def _check_target(pesq_u: float) -> float:
    pesq_u = float(pesq_u)
    if not (PESQ_MIN - 1e-12 <= pesq_u <= PESQ_MAX + 1e-12):
        raise ValidationError(f"PESQ target {pesq_u} outside [{PESQ_MIN}, {PESQ_MAX}]")
    return pesq_u


def alpha(pesq_u: float, base: float = 0.9) -> float:
    """Utterance weight ``base ** |pesq_u - 4.64|``; 1 for perfect quality."""
    pesq_u = _check_target(pesq_u)
    return base ** abs(pesq_u - PESQ_MAX)


def loss_utterance(pesq_hat, pesq_u) -> T.Tensor:
    d = T.as_tensor(pesq_hat) - float(pesq_u)
    return T.sum_(d * d)


def _score_penalty(q, pesq_u: float, a: float) -> T.Tensor:
    q = T.as_tensor(q)
    if q.size == 0:
        raise DimensionError("empty intermediate score matrix")
    if q.ndim == 1:
        q = T.reshape(q, (q.shape[0], 1))
    d = q - pesq_u
    # mean over all B_u * L_b entries
    return T.scale(T.sum_(d * d), a / q.size)


def loss_fle(pesq_hat, q, pesq_u, alpha_override: float | None = None, base: float = 0.9) -> T.Tensor:
    """Utterance loss plus ``alpha_u / (B_u * W)`` times the frame-score squared errors."""
    pesq_u = _check_target(pesq_u)
    a = alpha(pesq_u, base) if alpha_override is None else alpha_override
    return loss_utterance(pesq_hat, pesq_u) + _score_penalty(q, pesq_u, a)


def loss_ble(pesq_hat, q, pesq_u, alpha_override: float | None = None, base: float = 0.9) -> T.Tensor:
    """Utterance loss plus ``alpha_u / B_u`` times the block-score squared errors."""
    q = T.as_tensor(q)
    if q.ndim == 2 and q.shape[1] != 1:
        raise DimensionError(f"BLE scores must be B x 1, got {q.shape}")
    return loss_fle(pesq_hat, q, pesq_u, alpha_override, base)


def compute_loss(config: LossConfig, pesq_hat, q, pesq_u) -> T.Tensor:
    if config.kind == "UTTERANCE":
        return loss_utterance(pesq_hat, _check_target(pesq_u))
    if q is None:
        raise ValidationError(f"{config.kind} loss needs intermediate scores; the STAT head has none")
    fn = loss_fle if config.kind == "FLE" else loss_ble
    return fn(pesq_hat, q, pesq_u, config.alpha_override, config.alpha_base)


def check_compatible(loss_kind: str, embedding_mode: str) -> None:
    kind = parse_loss_kind(loss_kind)
    if kind == "FLE" and embedding_mode != "FLE" or kind == "BLE" and embedding_mode != "BLE":
        raise ValidationError(f"{kind} loss requires the {kind} embedding head, got {embedding_mode}")


def max_loss(kind: str) -> float:
    """Upper bound of any loss value given gated outputs and in-range targets."""
    span2 = (PESQ_MAX - PESQ_MIN) ** 2
    return span2 if parse_loss_kind(kind) == "UTTERANCE" else 2.0 * span2
