"""Utterance manifests and the synthetic desk-scale corpus.

A manifest is JSON-lines, one :class:`UtteranceRecord` per line. Audio paths
are stored relative to the manifest's directory when possible.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import signal

from . import channel
from .errors import UnsupportedVersionError, ValidationError
from .features import SAMPLE_RATE, write_wav
from .model import PESQ_MAX, PESQ_MIN

MANIFEST_VERSION = 1
CODECS = ("AMR-WB", "EVS", "G.722", "none")
ERASURE_KINDS = ("none", "random", "burst")
SPLITS = ("train", "dev", "test")


@dataclass
class UtteranceRecord:
    id: str
    audio_path: str
    split: str = "train"
    speaker: str | None = None
    language: str | None = None
    level_dbov: float = -26.0
    snr_db: float = math.inf
    codec: str = "none"
    bitrate: float | None = None
    fer: float = 0.0
    erasure_kind: str = "none"
    tandem: list[str] = field(default_factory=list)
    pesq_target: float | None = None
    tilt: float = 0.0
    level_method: str = channel.LEVEL_METHOD
    tools: list[dict] = field(default_factory=list)
    schema_version: int = MANIFEST_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("record id must be non-empty")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.id}: unknown split {self.split!r}")
        if self.codec not in CODECS:
            raise ValidationError(f"{self.id}: unknown codec {self.codec!r}")
        if self.erasure_kind not in ERASURE_KINDS:
            raise ValidationError(f"{self.id}: unknown erasure kind {self.erasure_kind!r}")
        if not 0.0 <= self.fer <= 1.0:
            raise ValidationError(f"{self.id}: fer {self.fer} outside [0, 1]")
        if self.fer > 0 and self.erasure_kind == "none":
            raise ValidationError(f"{self.id}: fer > 0 needs an erasure kind")
        if self.pesq_target is not None and not PESQ_MIN - 1e-9 <= self.pesq_target <= PESQ_MAX + 1e-9:
            raise ValidationError(f"{self.id}: pesq_target {self.pesq_target} outside [{PESQ_MIN}, {PESQ_MAX}]")
        if self.split in ("train", "dev") and self.pesq_target is None:
            raise ValidationError(f"{self.id}: {self.split} rows need a pesq_target")

    @property
    def chain(self) -> list[str]:
        """Codecs in processing order; empty for uncoded audio."""
        if self.tandem:
            return list(self.tandem)
        return [] if self.codec == "none" else [self.codec]

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.snr_db):
            d["snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceRecord":
        if d.get("schema_version") != MANIFEST_VERSION:
            raise UnsupportedVersionError(f"manifest schema {d.get('schema_version')!r} not supported")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown manifest fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("snr_db") == "inf":
            d["snr_db"] = math.inf
        return cls(**d)

    def resolve_audio(self, base_dir) -> Path:
        p = Path(self.audio_path)
        return p if p.is_absolute() else Path(base_dir) / p


def record_line(rec: UtteranceRecord) -> str:
    return json.dumps(rec.to_dict(), sort_keys=True, separators=(",", ":"))


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    from .checkpoint import atomic_write

    text = "".join(record_line(r) + "\n" for r in records)
    atomic_write(path, text.encode())


def read_manifest(path) -> list[UtteranceRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}:{n}: invalid JSON ({e})") from None
        out.append(UtteranceRecord.from_dict(d))
    ids = [r.id for r in out]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate utterance ids")
    return out


# --- synthetic corpus -------------------------------------------------------------

ERASURE_FRAME = 320  # 20 ms codec frame at 16 kHz
SYNTH_LEVELS = (-36.0, -26.0, -16.0)
SYNTH_SNRS = (15.0, 20.0, math.inf)
SYNTH_FERS = (0.0, 0.03, 0.06)
SYNTH_TILTS = (0.0, 0.3, 0.6)


def synth_target(snr_db: float, fer: float, tilt: float) -> float:
    """Pseudo-PESQ for synthetic degradations.

    ``1.04 + 3.6 * exp(-s)`` with severity ``s = 4 * 10**(-snr/20) + 10 * fer + tilt``.
    A clean utterance (infinite SNR, no erasures, no tilt) scores 4.64, and
    the score falls monotonically in each degradation.
    """
    noise_term = 0.0 if math.isinf(snr_db) else 4.0 * 10.0 ** (-snr_db / 20.0)
    s = noise_term + 10.0 * fer + tilt
    return PESQ_MIN + (PESQ_MAX - PESQ_MIN) * math.exp(-s)


def _speech_like(n: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited noise shaped by a syllable-rate envelope with pauses."""
    excitation = rng.standard_normal(n)
    lo = rng.uniform(150.0, 600.0)
    hi = rng.uniform(2000.0, 6000.0)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    carrier = signal.sosfilt(sos, excitation)
    env = np.full(n, 1e-3)
    t = int(rng.integers(800, 3200))
    while t < n:
        width = int(rng.integers(1600, 4800))  # 100-300 ms syllables
        seg = np.hanning(width) * rng.uniform(0.3, 1.0)
        stop = min(n, t + width)
        env[t:stop] += seg[:stop - t]
        t += width + int(rng.integers(0, 1600))
        if rng.random() < 0.15:
            t += int(rng.integers(3200, 8000))  # pause
    return carrier * env


def _apply_tilt(x: np.ndarray, tilt: float) -> np.ndarray:
    """One-pole low-pass with coefficient ``tilt``; 0 leaves the signal unchanged."""
    if tilt == 0.0:
        return x
    return signal.lfilter([1.0 - tilt], [1.0, -tilt], x)


def _apply_erasures(x: np.ndarray, pattern: channel.ErasurePattern) -> np.ndarray:
    y = x.copy()
    for k in np.flatnonzero(pattern.bits):
        y[k * ERASURE_FRAME:(k + 1) * ERASURE_FRAME] = 0.0
    return y


def synth_dataset(count: int, seed: int, out_dir, dev_every: int = 5,
                  min_seconds: float = 2.0, max_seconds: float = 8.0) -> list[UtteranceRecord]:
    """Write ``count`` synthetic utterances plus ``manifest.jsonl`` to ``out_dir``.

    Every fifth utterance (``dev_every``) goes to the dev split, the rest to
    train. Output is byte-identical for a given seed.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(int(min_seconds * SAMPLE_RATE), int(max_seconds * SAMPLE_RATE) + 1))
        level = float(rng.choice(SYNTH_LEVELS))
        snr = float(rng.choice(SYNTH_SNRS))
        fer = float(rng.choice(SYNTH_FERS))
        kind = "none" if fer == 0.0 else str(rng.choice(["random", "burst"]))
        tilt = float(rng.choice(SYNTH_TILTS))
        sub_seed = int(rng.integers(2**31))

        x = channel.highpass(_speech_like(n, rng))
        x = channel.adjust_level(_apply_tilt(x, tilt), level)
        if not math.isinf(snr):
            noise = rng.standard_normal(n)
            x = channel.mix_snr(x, noise, snr, seed=sub_seed)
        if fer > 0:
            frames = math.ceil(n / ERASURE_FRAME)
            pat = channel.gen_erasures(frames, fer, kind, seed=sub_seed)
            x = _apply_erasures(x, pat)
        x = np.clip(x, -1.0, 1.0)

        uid = f"syn{seed}_{i:04d}"
        rel = f"audio/{uid}.wav"
        write_wav(out_dir / rel, x)
        split = "dev" if dev_every and i % dev_every == dev_every - 1 else "train"
        records.append(UtteranceRecord(
            id=uid, audio_path=rel, split=split, speaker=f"spk{i % 4}", language="synthetic",
            level_dbov=level, snr_db=snr, fer=fer, erasure_kind=kind, tilt=tilt,
            pesq_target=synth_target(snr, fer, tilt)))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records
