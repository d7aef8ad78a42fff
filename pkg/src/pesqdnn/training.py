"""Adam, plateau learning-rate decay, early stopping and the epoch loop.

One optimizer step per utterance by default; the BPTT unroll always covers
every block of the utterance.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import STATE_MAGIC, Checkpoint, atomic_write, pack, unpack
from .errors import NonFiniteGradientError, ValidationError
from .features import NormStats
from .losses import LossConfig, check_compatible, compute_loss
from .model import PESQDNN, ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    decay_factor: float = 0.6
    decay_patience: int = 2
    stop_patience: int = 6
    max_epochs: int = 10000
    seed: int = 0
    accumulate: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # optional early exit once the epoch's mean training loss drops below this
    stop_below_train_loss: float | None = None

    def __post_init__(self):
        if self.lr < 0 or not 0 < self.decay_factor <= 1:
            raise ValidationError("lr must be >= 0 and decay_factor in (0, 1]")
        if self.accumulate < 1 or self.max_epochs < 0:
            raise ValidationError("accumulate must be >= 1 and max_epochs >= 0")


class TrainItem(NamedTuple):
    id: str
    blocks: np.ndarray  # B x K_in x W x C, normalized
    target: float


# --- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update; returns new parameter arrays and mutates ``state``."""
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - upd).astype(p.dtype, copy=False)
    return out


# --- schedule ----------------------------------------------------------------

class ScheduleEvent(NamedTuple):
    improved: bool
    decayed: bool
    stop: bool


class PlateauSchedule:
    """Learning-rate decay on dev-loss plateaus plus early stopping.

    Improvement means strictly below the best dev loss so far. The decay
    counter resets on improvement and after each decay; the stop counter
    resets only on improvement. On the epoch that triggers the stop no
    decay is applied.
    """

    def __init__(self, lr0: float = 1e-4, factor: float = 0.6, decay_patience: int = 2, stop_patience: int = 6):
        self.lr0 = lr0
        self.factor = factor
        self.decay_patience = decay_patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.best_epoch = -1
        self.epochs_since_improvement = 0
        self.plateau = 0
        self.decays = 0
        self.epoch = 0
        self.stopped = False

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor ** self.decays

    def step(self, dev_loss: float) -> ScheduleEvent:
        epoch = self.epoch
        self.epoch += 1
        if dev_loss < self.best:
            self.best = dev_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.plateau = 0
            return ScheduleEvent(True, False, False)
        self.epochs_since_improvement += 1
        self.plateau += 1
        if self.epochs_since_improvement >= self.stop_patience:
            self.stopped = True
            return ScheduleEvent(False, False, True)
        if self.plateau >= self.decay_patience:
            self.decays += 1
            self.plateau = 0
            return ScheduleEvent(False, True, False)
        return ScheduleEvent(False, False, False)

    def state_dict(self) -> dict:
        return dict(vars(self))

    def load_state_dict(self, d: dict) -> None:
        for k, v in d.items():
            setattr(self, k, v)


# --- training state -----------------------------------------------------------

@dataclass
class TrainState:
    model: PESQDNN
    adam: AdamState
    schedule: PlateauSchedule
    rng: np.random.Generator
    best_weights: dict[str, np.ndarray] | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def current_lr(self) -> float:
        return self.schedule.lr

    @property
    def epoch(self) -> int:
        return self.schedule.epoch

    @classmethod
    def fresh(cls, model: PESQDNN, cfg: TrainConfig) -> "TrainState":
        return cls(model,
                   AdamState.zeros_like(model.weight_arrays(), beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps),
                   PlateauSchedule(cfg.lr, cfg.decay_factor, cfg.decay_patience, cfg.stop_patience),
                   np.random.default_rng(cfg.seed))

    def to_bytes(self) -> bytes:
        arrays = {}
        for k, p in self.model.weight_arrays().items():
            arrays[f"param/{k}"] = p
            arrays[f"m/{k}"] = self.adam.m[k]
            arrays[f"v/{k}"] = self.adam.v[k]
            if self.best_weights is not None:
                arrays[f"best/{k}"] = self.best_weights[k]
        header = {
            "config": self.model.config.to_dict(),
            "dtype": np.dtype(self.model.dtype).str,
            "adam": {"step": self.adam.step, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps},
            "schedule": self.schedule.state_dict(),
            "rng": self.rng.bit_generator.state,
            "history": self.history,
        }
        return pack(STATE_MAGIC, header, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrainState":
        header, arrays = unpack(blob, STATE_MAGIC)
        config = ModelConfig.from_dict(header["config"])
        pick = lambda pre: {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}
        model = PESQDNN(config, pick("param/"), dtype=np.dtype(header["dtype"]))
        a = header["adam"]
        adam = AdamState(pick("m/"), pick("v/"), a["step"], a["beta1"], a["beta2"], a["eps"])
        schedule = PlateauSchedule()
        schedule.load_state_dict(header["schedule"])
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
        best = pick("best/") or None
        return cls(model, adam, schedule, rng, best, header["history"])

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_bytes(Path(path).read_bytes())


# --- loops ----------------------------------------------------------------------

def _apply_update(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> None:
    new = adam_step(state.model.weight_arrays(), grads, state.adam, lr)
    for k, arr in new.items():
        state.model.weights[k].data = arr


def utterance_loss(model: PESQDNN, blocks: np.ndarray, target: float, loss_config: LossConfig) -> T.Tensor:
    r = model.forward(blocks)
    return compute_loss(loss_config, r.pesq_hat, r.q, target)


def _loss_and_grads(model: PESQDNN, blocks, target, loss_config) -> tuple[float, dict[str, np.ndarray]]:
    model.zero_grad()
    with T.Tape() as tape:
        loss = utterance_loss(model, blocks, target, loss_config)
        T.backward(loss, tape)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.weights.items()}
    model.zero_grad()
    return float(loss.data), grads


def train_utterance(state: TrainState, blocks: np.ndarray, pesq_u: float, loss_config: LossConfig) -> float:
    """Forward over all blocks, backward through the whole unroll, one Adam step."""
    loss, grads = _loss_and_grads(state.model, blocks, pesq_u, loss_config)
    _apply_update(state, grads, state.current_lr)
    return loss


def evaluate_loss(model: PESQDNN, items: Sequence[TrainItem], loss_config: LossConfig) -> float:
    if not items:
        raise ValidationError("evaluation set is empty")
    with T.no_grad():
        losses = [float(utterance_loss(model, it.blocks, it.target, loss_config).data) for it in items]
    return float(np.mean(losses))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    state: TrainState
    history: list[dict]


def make_checkpoint(state: TrainState, norm_stats: NormStats | None, loss_config: LossConfig,
                    extra_meta: dict | None = None) -> Checkpoint:
    weights = state.best_weights if state.best_weights is not None else state.model.weight_arrays()
    sch = state.schedule
    meta = {
        "best_dev_loss": sch.best if math.isfinite(sch.best) else None,
        "best_epoch": sch.best_epoch,
        "epochs": sch.epoch,
        "decays": sch.decays,
        "loss_kind": loss_config.kind,
        **(extra_meta or {}),
    }
    return Checkpoint(state.model.config, weights, norm_stats, meta)


def run_training(model: PESQDNN, train: Sequence[TrainItem], dev: Sequence[TrainItem],
                 train_config: TrainConfig = TrainConfig(), loss_config: LossConfig = LossConfig(),
                 norm_stats: NormStats | None = None, state: TrainState | None = None,
                 log: Callable[[dict], None] | None = None,
                 dev_loss_fn: Callable[[int, PESQDNN, float], float] | None = None,
                 state_path=None) -> TrainResult:
    """Epoch loop with seeded shuffling, plateau decay and early stopping.

    ``dev_loss_fn(epoch, model, train_loss)`` replaces the dev-set evaluation,
    for scripted schedules or to schedule on the training loss itself. When ``state_path`` is given the full train
    state is written after every epoch so a run can be resumed.
    """
    if not train:
        raise ValidationError("training set is empty")
    if not dev and dev_loss_fn is None:
        raise ValidationError("development set is empty")
    if loss_config.kind != "UTTERANCE":
        check_compatible(loss_config.kind, model.config.embedding_mode)
    state = state or TrainState.fresh(model, train_config)
    model = state.model
    cfg = train_config
    while state.epoch < cfg.max_epochs and not state.schedule.stopped:
        epoch = state.epoch
        order = state.rng.permutation(len(train))
        losses = []
        acc: dict[str, np.ndarray] | None = None
        n_acc = 0
        for i in order:
            it = train[i]
            loss, grads = _loss_and_grads(model, it.blocks, it.target, loss_config)
            losses.append(loss)
            if cfg.accumulate == 1:
                _apply_update(state, grads, state.current_lr)
                continue
            acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
            n_acc += 1
            if n_acc == cfg.accumulate:
                _apply_update(state, {k: g / n_acc for k, g in acc.items()}, state.current_lr)
                acc, n_acc = None, 0
        if acc is not None:
            _apply_update(state, {k: g / n_acc for k, g in acc.items()}, state.current_lr)
        train_loss = float(np.mean(losses))
        dev_loss = dev_loss_fn(epoch, model, train_loss) if dev_loss_fn else evaluate_loss(model, dev, loss_config)
        lr_used = state.current_lr
        ev = state.schedule.step(dev_loss)
        if ev.improved:
            state.best_weights = {k: v.copy() for k, v in model.weight_arrays().items()}
        events = [name for name, flag in zip(("improved", "decay", "stop"), ev) if flag]
        rec = {"epoch": epoch, "train_loss": train_loss, "dev_loss": float(dev_loss), "lr": lr_used,
               "next_lr": state.current_lr, "events": events}
        state.history.append(rec)
        if log:
            log(rec)
        if state_path is not None:
            state.save(state_path)
        if cfg.stop_below_train_loss is not None and train_loss < cfg.stop_below_train_loss:
            break
    return TrainResult(make_checkpoint(state, norm_stats, loss_config), state, state.history)
