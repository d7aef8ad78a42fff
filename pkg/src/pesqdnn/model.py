"""PESQ-DNN forward pass.

Per-block CNN encoder and multi-width convolutions, a BLSTM over the block
sequence, then one of three embedding heads:

* ``STAT``: mean/std/min/max over blocks followed by two FC layers (the
  older PESQNet head, kept for ablation);
* ``FLE``: a per-block head emitting W gated frame scores;
* ``BLE``: a per-block head emitting one gated block score.

FLE/BLE scores are pooled over blocks by averaging (``AV``) or attention
(``AT``) before the output FC(1) and the terminal gate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ValidationError
from .features import BLOCK_FRAMES, K_IN, FeatureBlockSequence

PESQ_MIN = 1.04
PESQ_MAX = 4.64
PESQ_SPAN = PESQ_MAX - PESQ_MIN
PESQ_MID = PESQ_MIN + PESQ_SPAN / 2  # gate(0)

EMBEDDINGS = ("STAT", "FLE", "BLE")
POOLINGS = ("AV", "AT")
_POOL_KERNELS = {"none": None, "2x1": (2, 1), "2x2": (2, 2)}


def open_range(dtype) -> tuple[float, float]:
    """Smallest and largest values of ``dtype`` strictly inside (1.04, 4.64)."""
    lo, hi = np.dtype(dtype).type(PESQ_MIN), np.dtype(dtype).type(PESQ_MAX)
    while lo <= PESQ_MIN:
        lo = np.nextafter(lo, lo.dtype.type(np.inf))
    while hi >= PESQ_MAX:
        hi = np.nextafter(hi, hi.dtype.type(-np.inf))
    return lo, hi


def gate(x):
    """Map a real activation to the PESQ range: ``3.6 * sigmoid(x) + 1.04``.

    Once the sigmoid saturates the sum rounds onto an endpoint, so the result
    is clamped to the nearest representable values inside the open range.
    """
    if isinstance(x, T.Tensor):
        return T.clip(T.scale(T.sigmoid(x), PESQ_SPAN) + PESQ_MIN, *open_range(x.dtype))
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(PESQ_SPAN * s + PESQ_MIN, *open_range(np.float64))


@dataclass(frozen=True)
class ConvSpec:
    h: int
    w: int
    maps: int
    pool: str = "none"


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 2
    input_bins: int = K_IN
    block_frames: int = BLOCK_FRAMES
    encoder_layers: tuple[ConvSpec, ...] = (
        ConvSpec(3, 3, 32, "2x1"),
        ConvSpec(3, 3, 32, "2x2"),
        ConvSpec(3, 3, 64, "none"),
    )
    multiwidth_widths: tuple[int, ...] = (1, 2, 4, 8)
    multiwidth_maps: int = 64
    blstm_hidden: int = 128
    embedding_mode: str = "FLE"
    pooling: str = "AV"
    head_hidden: int = 64
    stat_hidden: tuple[int, ...] = (128, 64)
    attention_hidden: int = 64
    leaky_slope: float = T.DEFAULT_LEAKY_SLOPE
    rng_seed: int = 42

    def __post_init__(self):
        layers = tuple(ConvSpec(**l) if isinstance(l, dict) else ConvSpec(*l) if not isinstance(l, ConvSpec) else l
                       for l in self.encoder_layers)
        object.__setattr__(self, "encoder_layers", layers)
        object.__setattr__(self, "multiwidth_widths", tuple(self.multiwidth_widths))
        object.__setattr__(self, "stat_hidden", tuple(self.stat_hidden))
        object.__setattr__(self, "embedding_mode", self.embedding_mode.upper())
        object.__setattr__(self, "pooling", self.pooling.upper())
        self.validate()

    def validate(self) -> None:
        if self.input_channels not in (1, 2):
            raise ValidationError("input_channels must be 1 (amplitude) or 2 (complex)")
        if self.embedding_mode not in EMBEDDINGS:
            raise ValidationError(f"embedding_mode must be one of {EMBEDDINGS}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}")
        if any(w != 2 ** i for i, w in enumerate(self.multiwidth_widths)) or not self.multiwidth_widths:
            raise ValidationError(f"multi-width kernel widths must be 1, 2, 4, ...; got {self.multiwidth_widths}")
        for l in self.encoder_layers:
            if l.pool not in _POOL_KERNELS:
                raise ValidationError(f"unknown pool kind {l.pool!r}")
        H, W = self.encoder_output_hw
        if H < 1 or W < max(self.multiwidth_widths):
            raise ValidationError(f"encoder output {H}x{W} too small for multi-width widths {self.multiwidth_widths}")

    @property
    def encoder_output_hw(self) -> tuple[int, int]:
        H, W = self.input_bins, self.block_frames
        for l in self.encoder_layers:
            k = _POOL_KERNELS[l.pool]
            if k:
                if H % k[0] or W % k[1]:
                    raise ValidationError(f"pooling {l.pool} does not divide {H}x{W}")
                H, W = H // k[0], W // k[1]
        return H, W

    @property
    def encoder_maps(self) -> int:
        return self.encoder_layers[-1].maps if self.encoder_layers else self.input_channels

    @property
    def encoding_dim(self) -> int:
        return len(self.multiwidth_widths) * self.multiwidth_maps

    @property
    def score_width(self) -> int:
        """N: output width of the per-block head (W for FLE, 1 for BLE)."""
        return {"FLE": self.block_frames, "BLE": 1}.get(self.embedding_mode, 0)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_layers"] = [asdict(l) for l in self.encoder_layers]
        d["multiwidth_widths"] = list(self.multiwidth_widths)
        d["stat_hidden"] = list(self.stat_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "encoder_layers" in d:
            d["encoder_layers"] = tuple(ConvSpec(**l) if isinstance(l, dict) else ConvSpec(*l) for l in d["encoder_layers"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def toy_config(**overrides) -> ModelConfig:
    """Default topology with every encoder and multi-width map count halved."""
    base = ModelConfig()
    layers = tuple(replace(l, maps=l.maps // 2) for l in base.encoder_layers)
    cfg = dict(encoder_layers=layers, multiwidth_maps=base.multiwidth_maps // 2)
    cfg.update(overrides)
    return replace(base, **cfg)


def micro_config(**overrides) -> ModelConfig:
    """A few-hundred-parameter topology for exhaustive gradient checks."""
    cfg = dict(input_bins=8, encoder_layers=(ConvSpec(3, 3, 2, "2x1"), ConvSpec(3, 3, 2, "2x2"), ConvSpec(3, 3, 3)),
               multiwidth_maps=2, blstm_hidden=3, head_hidden=4, stat_hidden=(5, 4), attention_hidden=3)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def param_specs(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], int, int]]:
    """Parameter name -> (shape, fan_in, fan_out); fans are 0 for biases."""
    specs: dict[str, tuple[tuple[int, ...], int, int]] = {}

    def fc(name, n_in, n_out):
        specs[f"{name}.w"] = ((n_in, n_out), n_in, n_out)
        specs[f"{name}.b"] = ((n_out,), 0, 0)

    cin = config.input_channels
    for i, l in enumerate(config.encoder_layers):
        specs[f"enc{i}.kernel"] = ((l.h, l.w, cin, l.maps), l.h * l.w * cin, l.h * l.w * l.maps)
        specs[f"enc{i}.bias"] = ((l.maps,), 0, 0)
        cin = l.maps
    H, _ = config.encoder_output_hw
    m = config.multiwidth_maps
    for width in config.multiwidth_widths:
        specs[f"mw{width}.kernel"] = ((H, width, cin, m), H * width * cin, H * width * m)
        specs[f"mw{width}.bias"] = ((m,), 0, 0)
    D, Hd = config.encoding_dim, config.blstm_hidden
    for d in ("fw", "bw"):
        specs[f"lstm_{d}.wx"] = ((D, 4 * Hd), D, 4 * Hd)
        specs[f"lstm_{d}.wh"] = ((Hd, 4 * Hd), Hd, 4 * Hd)
        specs[f"lstm_{d}.b"] = ((4 * Hd,), 0, 0)
    if config.embedding_mode == "STAT":
        n_in = 4 * 2 * Hd
        for i, n in enumerate(config.stat_hidden):
            fc(f"stat{i}", n_in, n)
            n_in = n
        fc("out", n_in, 1)
    else:
        fc("head0", 2 * Hd, config.head_hidden)
        fc("head1", config.head_hidden, config.score_width)
        if config.pooling == "AT":
            fc("att0", 2 * Hd, config.attention_hidden)
            fc("att1", config.attention_hidden, 1)
        fc("out", config.score_width, 1)
    return specs


def init_weights(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, LSTM forget-gate bias +1.

    For FLE/BLE heads the output layer reads gated scores that sit near the
    range midpoint 2.84 rather than near zero. Its bias starts at
    ``-2.84 * sum(out.w)`` so the final gate begins unsaturated; with a zero
    bias a random draw often starts the estimate pinned near 1.04 or 4.64,
    where the gate gradient nearly vanishes.
    """
    rng = np.random.default_rng(config.rng_seed if seed is None else seed)
    w = {}
    for name, (shape, fan_in, fan_out) in param_specs(config).items():
        if fan_in:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w[name] = rng.uniform(-lim, lim, size=shape)
        else:
            w[name] = np.zeros(shape)
    Hd = config.blstm_hidden
    for d in ("fw", "bw"):
        w[f"lstm_{d}.b"][Hd:2 * Hd] = 1.0
    if config.embedding_mode != "STAT":
        w["out.b"] = -PESQ_MID * w["out.w"].sum(axis=0)
    return w


@dataclass
class UtterancePrediction:
    pesq_hat: float
    block_scores: np.ndarray | None = None  # B x N
    attention: np.ndarray | None = None  # B

    def to_dict(self) -> dict:
        return {
            "pesq_hat": self.pesq_hat,
            "block_scores": None if self.block_scores is None else self.block_scores.tolist(),
            "attention": None if self.attention is None else self.attention.tolist(),
        }


@dataclass
class ForwardResult:
    pesq_hat: T.Tensor  # shape (1,)
    q: T.Tensor | None = None
    attention: T.Tensor | None = None
    hidden: T.Tensor | None = None
    encodings: T.Tensor | None = None
    trace: dict = field(default_factory=dict)


class PESQDNN:
    """Model parameters plus the forward computation.

    ``weights`` maps parameter names to leaf tensors; optimizers update
    ``weights[name].data`` in place of the array.
    """

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray] | None = None, dtype=None):
        self.config = config
        dtype = np.dtype(T._DTYPES.get(dtype, dtype) if dtype is not None else T.get_default_dtype())
        raw = init_weights(config) if weights is None else weights
        expected = {k: v[0] for k, v in param_specs(config).items()}
        if set(raw) != set(expected):
            raise ValidationError(f"weight names do not match config: missing {sorted(set(expected) - set(raw))}, "
                                  f"extra {sorted(set(raw) - set(expected))}")
        for k, v in raw.items():
            if tuple(np.shape(v)) != expected[k]:
                raise ValidationError(f"weight {k} has shape {np.shape(v)}, expected {expected[k]}")
        self.weights = {k: T.Tensor(np.array(raw[k], dtype=dtype), requires_grad=True, name=k) for k in sorted(raw)}
        self.dtype = dtype

    def parameters(self) -> dict[str, T.Tensor]:
        return self.weights

    def weight_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.weights.items()}

    def zero_grad(self) -> None:
        for p in self.weights.values():
            p.grad = None

    def _fc(self, x, name):
        return x @ self.weights[f"{name}.w"] + self.weights[f"{name}.b"]

    def _act(self, x):
        return T.leaky_relu(x, self.config.leaky_slope)

    # --- stages -----------------------------------------------------------

    def encode_blocks(self, blocks, trace: dict | None = None) -> T.Tensor:
        """``B x K_in x W x C`` blocks to ``B x D`` encodings (blocks share weights)."""
        cfg = self.config
        x = T.as_tensor(blocks, dtype=self.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        want = (cfg.input_bins, cfg.block_frames, cfg.input_channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise DimensionError(f"block shape {x.shape[1:]} does not match config {want}")
        for i, l in enumerate(cfg.encoder_layers):
            x = self._act(T.conv2d(x, self.weights[f"enc{i}.kernel"], self.weights[f"enc{i}.bias"], "same"))
            k = _POOL_KERNELS[l.pool]
            if k:
                x = T.maxpool2d(x, k)
            if trace is not None:
                trace[f"enc{i}"] = x.shape[1:]
        feats = []
        for width in cfg.multiwidth_widths:
            y = self._act(T.conv2d(x, self.weights[f"mw{width}.kernel"], self.weights[f"mw{width}.bias"], "valid"))
            # y: B x 1 x (W' - width + 1) x maps; max over time per map
            feats.append(T.max_(T.reshape(y, (y.shape[0], y.shape[2], y.shape[3])), axis=1))
        return T.concat(feats, axis=1)

    def _lstm(self, xs: T.Tensor, d: str, reverse: bool) -> list[T.Tensor]:
        Hd = self.config.blstm_hidden
        wx, wh, b = (self.weights[f"lstm_{d}.{n}"] for n in ("wx", "wh", "b"))
        zx = xs @ wx + b
        B = xs.shape[0]
        h = T.Tensor(np.zeros((1, Hd), dtype=self.dtype))
        c = T.Tensor(np.zeros((1, Hd), dtype=self.dtype))
        out: list[T.Tensor] = [None] * B  # type: ignore[list-item]
        order = range(B - 1, -1, -1) if reverse else range(B)
        for t in order:
            z = zx[t:t + 1] + h @ wh
            i = T.sigmoid(z[:, :Hd])
            f = T.sigmoid(z[:, Hd:2 * Hd])
            g = T.tanh(z[:, 2 * Hd:3 * Hd])
            o = T.sigmoid(z[:, 3 * Hd:])
            c = f * c + i * g
            h = o * T.tanh(c)
            out[t] = h
        return out

    def blstm(self, encodings: T.Tensor) -> T.Tensor:
        """Bidirectional LSTM over the block axis: ``B x D`` to ``B x 2H``."""
        fw = self._lstm(encodings, "fw", reverse=False)
        bw = self._lstm(encodings, "bw", reverse=True)
        return T.concat([T.concat(fw, axis=0), T.concat(bw, axis=0)], axis=1)

    def embed_stat(self, hidden: T.Tensor) -> T.Tensor:
        """Statistics pooling head; returns the pre-gate output activation (1 x 1)."""
        stats = T.concat([T.mean(hidden, axis=0), T.std(hidden, axis=0),
                          T.min_(hidden, axis=0), T.max_(hidden, axis=0)], axis=0)
        x = T.reshape(stats, (1, -1))
        for i in range(len(self.config.stat_hidden)):
            x = self._act(self._fc(x, f"stat{i}"))
        return self._fc(x, "out")

    def embed_scores(self, hidden: T.Tensor) -> T.Tensor:
        """Per-block FLE/BLE head: gated ``B x N`` scores."""
        x = self._act(self._fc(hidden, "head0"))
        return gate(self._fc(x, "head1"))

    def attention(self, hidden: T.Tensor) -> T.Tensor:
        x = self._act(self._fc(hidden, "att0"))
        logits = self._fc(x, "att1")  # B x 1
        return T.softmax(logits, axis=0)

    def pool_scores(self, q: T.Tensor, hidden: T.Tensor):
        if self.config.pooling == "AV":
            return T.mean(q, axis=0, keepdims=True), None
        a = self.attention(hidden)
        return T.sum_(a * q, axis=0, keepdims=True), a

    def forward(self, blocks, trace: dict | None = None) -> ForwardResult:
        enc = self.encode_blocks(blocks, trace)
        hidden = self.blstm(enc)
        if self.config.embedding_mode == "STAT":
            pesq = gate(self.embed_stat(hidden))
            return ForwardResult(T.reshape(pesq, (1,)), hidden=hidden, encodings=enc, trace=trace or {})
        q = self.embed_scores(hidden)
        pooled, a = self.pool_scores(q, hidden)
        pesq = gate(self._fc(pooled, "out"))
        a_vec = T.reshape(a, (a.shape[0],)) if a is not None else None
        return ForwardResult(T.reshape(pesq, (1,)), q=q, attention=a_vec, hidden=hidden,
                             encodings=enc, trace=trace or {})

    __call__ = forward

    def predict(self, seq: FeatureBlockSequence | np.ndarray) -> UtterancePrediction:
        if isinstance(seq, FeatureBlockSequence):
            if not seq.normalization_applied:
                raise ContractError(f"utterance {seq.utterance_id!r}: features must be normalized before predict")
            blocks = seq.blocks
        else:
            blocks = seq
        with T.no_grad():
            r = self.forward(blocks)
        return UtterancePrediction(
            float(r.pesq_hat.data[0]),
            None if r.q is None else r.q.data.copy(),
            None if r.attention is None else r.attention.data.copy(),
        )

