"""Spectrogram front-end: framing, channel layout, normalization and blocking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .errors import InputTooShortError, ValidationError, UnsupportedVersionError

SAMPLE_RATE = 16000
FRAME_LEN = 512
HOP = 256
NUM_BINS = FRAME_LEN // 2 + 1  # 257
K_IN = 260
BLOCK_FRAMES = 16
NORM_EPS = 1e-8
NORM_STATS_VERSION = 1

MODES = {"amplitude": 1, "complex": 2}


def periodic_hann(n: int = FRAME_LEN) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def num_frames(num_samples: int) -> int:
    if num_samples < FRAME_LEN:
        return 0
    return (num_samples - FRAME_LEN) // HOP + 1


@dataclass
class Spectrogram:
    frames: np.ndarray  # L x 257 complex
    sample_rate: int = SAMPLE_RATE
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def stft(waveform: np.ndarray) -> Spectrogram:
    """Periodic-Hann STFT with 512-sample frames and 50% overlap."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected mono waveform, got shape {x.shape}")
    if x.size < FRAME_LEN:
        raise InputTooShortError(f"need at least {FRAME_LEN} samples, got {x.size}")
    frames = sliding_window_view(x, FRAME_LEN)[::HOP]
    return Spectrogram(np.fft.rfft(frames * periodic_hann(), axis=-1))


def to_channels(spec: Spectrogram, mode: str = "complex", k_in: int = K_IN) -> np.ndarray:
    """Lay out a spectrogram as ``L x k_in x C`` real features.

    Amplitude mode gives ``|Y|`` in one channel; complex mode gives real and
    imaginary parts in two. Bins above 256 are zero padding.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown feature mode {mode!r}")
    Y = spec.frames
    L, nb = Y.shape
    out = np.zeros((L, k_in, MODES[mode]))
    if mode == "amplitude":
        out[:, :nb, 0] = np.abs(Y)
    else:
        out[:, :nb, 0] = Y.real
        out[:, :nb, 1] = Y.imag
    return out


def extract(waveform: np.ndarray, mode: str = "complex") -> np.ndarray:
    return to_channels(stft(waveform), mode)


@dataclass
class NormStats:
    mean: np.ndarray  # K_in x C
    std: np.ndarray
    source_utterance_count: int
    mode: str = "complex"

    def apply(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[1:] != self.mean.shape:
            raise ValidationError(f"features {feats.shape[1:]} do not match stats {self.mean.shape}")
        return (feats - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            "schema_version": NORM_STATS_VERSION,
            "mode": self.mode,
            "source_utterance_count": int(self.source_utterance_count),
            "shape": list(self.mean.shape),
            "mean": [float(v) for v in self.mean.ravel()],
            "std": [float(v) for v in self.std.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        if d.get("schema_version") != NORM_STATS_VERSION:
            raise UnsupportedVersionError(f"norm stats schema {d.get('schema_version')!r} not supported")
        shape = tuple(d["shape"])
        return cls(np.asarray(d["mean"], dtype=np.float64).reshape(shape),
                   np.asarray(d["std"], dtype=np.float64).reshape(shape),
                   int(d["source_utterance_count"]), d.get("mode", "complex"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_norm_stats(training_features, mode: str = "complex") -> NormStats:
    """Per-(bin, channel) mean and population std over every training frame.

    Per-utterance moments are merged with Chan's pairwise update so large
    corpora never need to be concatenated.
    """
    count = 0
    n_tot = 0
    mean = m2 = None
    for feats in training_features:
        feats = np.asarray(feats, dtype=np.float64)
        n = feats.shape[0]
        if n == 0:
            continue
        mu = feats.mean(axis=0)
        d = feats - mu
        ss = (d * d).sum(axis=0)
        if mean is None:
            mean, m2 = mu, ss
        else:
            delta = mu - mean
            tot = n_tot + n
            mean = mean + delta * (n / tot)
            m2 = m2 + ss + delta * delta * (n_tot * n / tot)
        n_tot += n
        count += 1
    if count == 0:
        raise ValidationError("cannot compute normalization statistics from an empty training set")
    std = np.maximum(np.sqrt(m2 / n_tot), NORM_EPS)
    return NormStats(mean, std, count, mode)


@dataclass
class FeatureBlockSequence:
    blocks: np.ndarray  # B x K_in x W x C
    utterance_id: str = ""
    normalization_applied: bool = True
    discarded_frames: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return self.blocks.shape[0]


def block(features: np.ndarray, stats: NormStats | None, utterance_id: str = "",
          block_frames: int = BLOCK_FRAMES) -> FeatureBlockSequence:
    """Normalize (if ``stats`` given) and cut into non-overlapping W-frame blocks.

    Trailing frames that do not fill a whole block are dropped.
    """
    L = features.shape[0]
    if L < block_frames:
        raise InputTooShortError(f"{L} frames is shorter than one block of {block_frames}")
    feats = stats.apply(features) if stats is not None else features
    B = L // block_frames
    used = feats[:B * block_frames]
    blocks = used.reshape(B, block_frames, *feats.shape[1:]).transpose(0, 2, 1, 3)
    return FeatureBlockSequence(np.ascontiguousarray(blocks), utterance_id, stats is not None,
                                L - B * block_frames)


def unblock(seq: FeatureBlockSequence) -> np.ndarray:
    """Inverse of the blocking step: ``B*W x K_in x C`` frames."""
    B, K, W, C = seq.blocks.shape
    return seq.blocks.transpose(0, 2, 1, 3).reshape(B * W, K, C)


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono 16 kHz WAV (16-bit PCM or 32-bit float) as float64."""
    rate, data = wavfile.read(str(path))
    if rate != expected_rate:
        raise ValidationError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype.kind == "f":
        return data.astype(np.float64)
    raise ValidationError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, waveform: np.ndarray, rate: int = SAMPLE_RATE, fmt: str = "float") -> None:
    x = np.asarray(waveform)
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(path), rate, data)
