"""Signal-level degradations: active level, additive noise, frame erasures.

Levels are in dBov with 0 dBov at RMS 1.0 (a full-scale square wave). The
active level is a simplified stand-in for ITU-T P.56: RMS over 16 ms frames
whose energy lies within 40 dB of the loudest frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ParameterError, ValidationError
from .features import SAMPLE_RATE

ACTIVE_FRAME = 256  # 16 ms at 16 kHz
ACTIVE_THRESHOLD_DB = 40.0
LEVEL_METHOD = "active-frame-rms-40dB-16ms"


def _frame_energies(x: np.ndarray, frame: int = ACTIVE_FRAME) -> np.ndarray:
    n = max(1, len(x) // frame)
    seg = x[:n * frame] if len(x) >= frame else np.pad(x, (0, frame - len(x)))
    return (seg.reshape(n, frame) ** 2).mean(axis=1)


def active_rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    e = _frame_energies(x)
    peak = e.max()
    if peak <= 0.0:
        raise ValidationError("signal is silent; active level undefined")
    active = e >= peak * 10.0 ** (-ACTIVE_THRESHOLD_DB / 10.0)
    return math.sqrt(float(e[active].mean()))


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return math.sqrt(float(np.mean(x * x)))


def level_dbov(x: np.ndarray) -> float:
    return 20.0 * math.log10(active_rms(x))


def adjust_level(waveform: np.ndarray, target_dbov: float) -> np.ndarray:
    """Scale so the active RMS equals ``target_dbov``."""
    x = np.asarray(waveform, dtype=np.float64)
    return x * (10.0 ** (target_dbov / 20.0) / active_rms(x))


def _fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise ValidationError("empty noise signal")
    offset = int(rng.integers(noise.size))
    idx = (offset + np.arange(length)) % noise.size
    return noise[idx]


def noise_gain(speech: np.ndarray, noise_segment: np.ndarray, snr_db: float) -> float:
    nr = rms(noise_segment)
    if nr == 0.0:
        raise ValidationError("noise has zero energy; cannot reach a finite SNR")
    return active_rms(speech) / (nr * 10.0 ** (snr_db / 20.0))


def mix_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float, seed: int = 0) -> np.ndarray:
    """``s + g*d`` with ``g`` set so active-speech RMS over noise RMS hits ``snr_db``.

    The noise is read circularly from a seeded random offset, so shorter
    noise files are tiled. ``snr_db = inf`` returns the speech unchanged.
    """
    s = np.asarray(speech, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return s.copy()
    d = _fit_noise(noise, s.size, np.random.default_rng(seed))
    return s + noise_gain(s, d, snr_db) * d


def measured_snr(speech: np.ndarray, mixed: np.ndarray) -> float:
    d = np.asarray(mixed, dtype=np.float64) - np.asarray(speech, dtype=np.float64)
    return 20.0 * math.log10(active_rms(speech) / rms(d))


def highpass(x: np.ndarray, cutoff_hz: float = 50.0, order: int = 4, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Butterworth high-pass used in place of the G.191 MSIN filter."""
    sos = signal.butter(order, cutoff_hz, btype="highpass", fs=rate, output="sos")
    return signal.sosfilt(sos, np.asarray(x, dtype=np.float64))


# --- frame erasures ---------------------------------------------------------------

@dataclass
class ErasurePattern:
    bits: np.ndarray  # uint8, 1 = lost
    target_fer: float
    kind: str
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def empirical_rate(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0

    def run_lengths(self) -> tuple[np.ndarray, np.ndarray]:
        """Lengths of loss runs and of non-loss runs."""
        b = self.bits.astype(np.int8)
        edges = np.flatnonzero(np.diff(b)) + 1
        starts = np.concatenate(([0], edges))
        lengths = np.diff(np.concatenate((starts, [b.size])))
        vals = b[starts]
        return lengths[vals == 1], lengths[vals == 0]

    def header(self) -> str:
        extra = " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return (f"# kind={self.kind} fer={self.target_fer} seed={self.seed} frames={self.bits.size} "
                f"empirical={self.empirical_rate:.6f} {extra}").rstrip()

    def save(self, path) -> None:
        lines = "\n".join("1" if b else "0" for b in self.bits.tolist())
        Path(path).write_text(self.header() + "\n" + lines + "\n")

    @classmethod
    def load(cls, path) -> "ErasurePattern":
        text = Path(path).read_text().splitlines()
        fields = dict(tok.split("=", 1) for tok in text[0].lstrip("# ").split())
        bits = np.array([int(line) for line in text[1:] if line.strip()], dtype=np.uint8)
        known = {"kind", "fer", "seed", "frames", "empirical"}
        params = {k: float(v) for k, v in fields.items() if k not in known}
        return cls(bits, float(fields["fer"]), fields["kind"], int(fields["seed"]), params)


def gilbert_rates(fer: float, gamma: float) -> tuple[float, float]:
    """Transition probabilities (good->bad ``p``, bad->good ``q``) of a Gilbert channel.

    The bad state always loses the frame, so the stationary loss rate is
    ``p / (p + q) = fer``; ``gamma = 1 - p - q`` is the lag-one correlation
    of the loss process (0 gives i.i.d. losses).
    """
    if not 0.0 <= fer <= 0.5:
        raise ParameterError(f"fer must lie in [0, 0.5], got {fer}")
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"burstiness gamma must lie in [0, 1), got {gamma}")
    return fer * (1.0 - gamma), (1.0 - fer) * (1.0 - gamma)


def _two_state_chain(n: int, p: float, q: float, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` states of a good/bad chain started from its stationary law.

    Sojourn times are geometric, so the chain is built from alternating run
    lengths instead of per-frame coin flips.
    """
    if p == 0.0:
        return np.zeros(n, dtype=np.uint8)
    bad_first = bool(rng.random() < p / (p + q))
    runs: list[np.ndarray] = []
    total = 0
    chunk = max(16, int(n * p * q / (p + q)) + 16)
    while total < n:
        good = rng.geometric(p, size=chunk)
        bad = rng.geometric(q, size=chunk)
        pair = np.stack((bad, good) if bad_first else (good, bad), axis=1).ravel()
        runs.append(pair)
        total += int(pair.sum())
    lengths = np.concatenate(runs)
    values = np.tile(np.array([1, 0] if bad_first else [0, 1], dtype=np.uint8), lengths.size // 2)
    return np.repeat(values, lengths)[:n]


def gen_erasures_random(frame_count: int, fer: float, seed: int = 0, gamma: float = 0.0) -> ErasurePattern:
    """Gilbert-model erasures; ``gamma = 0`` is Bernoulli(fer)."""
    if frame_count < 1:
        raise ParameterError("frame_count must be >= 1")
    p, q = gilbert_rates(fer, gamma)
    bits = _two_state_chain(frame_count, p, q, np.random.default_rng(seed))
    return ErasurePattern(bits, fer, "random", seed, {"gamma": gamma, "p": p, "q": q})


def burst_rates(fer: float, mean_burst_len: float) -> tuple[float, float]:
    """Gilbert rates giving geometric loss bursts of the given mean and stationary rate ``fer``."""
    if mean_burst_len < 1:
        raise ParameterError("mean_burst_len must be >= 1")
    if not 0.0 <= fer < 1.0:
        raise ParameterError(f"fer must lie in [0, 1), got {fer}")
    q = 1.0 / mean_burst_len
    p = fer * q / (1.0 - fer)
    if p > 1.0:
        raise ParameterError(f"fer {fer} unreachable with mean burst length {mean_burst_len}")
    return p, q


def gen_erasures_burst(frame_count: int, fer: float, mean_burst_len: float = 4.0, seed: int = 0) -> ErasurePattern:
    """Bursty erasures: geometric loss runs of mean ``mean_burst_len``, gaps sized for ``fer``."""
    if frame_count < 1:
        raise ParameterError("frame_count must be >= 1")
    p, q = burst_rates(fer, mean_burst_len)
    bits = _two_state_chain(frame_count, p, q, np.random.default_rng(seed))
    return ErasurePattern(bits, fer, "burst", seed, {"mean_burst_len": mean_burst_len, "p": p, "q": q})


def gen_erasures(frame_count: int, fer: float, kind: str = "random", seed: int = 0,
                 gamma: float = 0.0, mean_burst_len: float = 4.0) -> ErasurePattern:
    if kind == "none" or fer == 0.0:
        return ErasurePattern(np.zeros(frame_count, dtype=np.uint8), 0.0, "none" if kind == "none" else kind, seed)
    if kind == "random":
        return gen_erasures_random(frame_count, fer, seed, gamma)
    if kind == "burst":
        return gen_erasures_burst(frame_count, fer, mean_burst_len, seed)
    raise ParameterError(f"unknown erasure kind {kind!r}")
