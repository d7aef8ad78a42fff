import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pesqdnn.channel import level_dbov
from pesqdnn.dataset import (MANIFEST_VERSION, SYNTH_FERS, SYNTH_SNRS, SYNTH_TILTS, UtteranceRecord, read_manifest,
                             synth_dataset, synth_target, write_manifest)
from pesqdnn.errors import UnsupportedVersionError, ValidationError
from pesqdnn.features import read_wav


def test_clean_target_is_maximum():
    assert synth_target(math.inf, 0.0, 0.0) == pytest.approx(4.64, abs=1e-15)


@given(st.sampled_from(SYNTH_SNRS), st.sampled_from(SYNTH_TILTS))
def test_target_monotone_in_fer(snr, tilt):
    values = [synth_target(snr, f, tilt) for f in SYNTH_FERS]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert all(1.04 <= v <= 4.64 for v in values)


@given(st.floats(-10, 60), st.floats(0, 1), st.floats(0, 1))
def test_target_monotone_in_noise_and_tilt(snr, fer, tilt):
    t = synth_target(snr, fer, tilt)
    assert 1.04 <= t <= 4.64
    assert synth_target(snr + 1, fer, tilt) >= t
    assert synth_target(snr, fer, tilt + 0.1) < t


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    return out, synth_dataset(6, seed=3, out_dir=out, min_seconds=1.0, max_seconds=2.0)


def test_synth_is_byte_identical(corpus, tmp_path):
    out, recs = corpus
    again = synth_dataset(6, seed=3, out_dir=tmp_path, min_seconds=1.0, max_seconds=2.0)
    assert (tmp_path / "manifest.jsonl").read_bytes() == (out / "manifest.jsonl").read_bytes()
    for r in recs:
        assert (tmp_path / r.audio_path).read_bytes() == (out / r.audio_path).read_bytes()
    assert [r.to_dict() for r in again] == [r.to_dict() for r in recs]


def test_synth_other_seed_differs(corpus, tmp_path):
    out, recs = corpus
    synth_dataset(1, seed=4, out_dir=tmp_path, min_seconds=1.0, max_seconds=2.0)
    assert (tmp_path / "audio/syn4_0000.wav").read_bytes() != (out / recs[0].audio_path).read_bytes()


def test_synth_records(corpus):
    out, recs = corpus
    assert [r.split for r in recs] == ["train"] * 4 + ["dev", "train"]
    assert read_manifest(out / "manifest.jsonl") == recs
    for r in recs:
        x = read_wav(out / r.audio_path)
        assert 16000 <= x.size <= 32000 and np.max(np.abs(x)) <= 1.0
        assert r.pesq_target == synth_target(r.snr_db, r.fer, r.tilt)
        assert (r.fer == 0.0) == (r.erasure_kind == "none")
        if r.fer == 0.0 and math.isinf(r.snr_db):
            assert abs(level_dbov(x) - r.level_dbov) < 0.1


def rec(**kw):
    base = dict(id="u1", audio_path="a.wav", pesq_target=3.0)
    base.update(kw)
    return UtteranceRecord(**base)


def test_manifest_roundtrip(tmp_path):
    recs = [rec(), rec(id="u2", snr_db=12.5, codec="EVS", bitrate=13.2, fer=0.03, erasure_kind="burst",
                       split="dev", tandem=["AMR-WB", "EVS"], tools=[{"stage": "ENC", "exit_code": 0}]),
            rec(id="u3", split="test", pesq_target=None)]
    write_manifest(tmp_path / "m.jsonl", recs)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["snr_db"] == "inf"
    assert json.loads(lines[0])["schema_version"] == MANIFEST_VERSION
    assert read_manifest(tmp_path / "m.jsonl") == recs


def test_chain_order():
    assert rec().chain == []
    assert rec(codec="G.722").chain == ["G.722"]
    assert rec(codec="EVS", tandem=["AMR-WB", "EVS"]).chain == ["AMR-WB", "EVS"]


@pytest.mark.parametrize("kw", [
    dict(fer=0.03),
    dict(pesq_target=None),
    dict(split="dev", pesq_target=None),
    dict(pesq_target=4.9),
    dict(codec="opus"),
    dict(split="validation"),
    dict(id=""),
    dict(fer=1.5, erasure_kind="random"),
])
def test_record_invariants(kw):
    with pytest.raises(ValidationError):
        rec(**kw)


def test_manifest_rejections(tmp_path):
    good = rec().to_dict()
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({**good, "schema_version": 2}) + "\n")
    with pytest.raises(UnsupportedVersionError):
        read_manifest(p)
    p.write_text(json.dumps({**good, "colour": "red"}) + "\n")
    with pytest.raises(ValidationError, match="colour"):
        read_manifest(p)
    p.write_text(json.dumps(good) + "\n" + json.dumps(good) + "\n")
    with pytest.raises(ValidationError, match="duplicate"):
        read_manifest(p)
    p.write_text("{not json\n")
    with pytest.raises(ValidationError):
        read_manifest(p)


def test_resolve_audio(tmp_path):
    assert rec().resolve_audio(tmp_path) == tmp_path / "a.wav"
    assert rec(audio_path="/abs/x.wav").resolve_audio(tmp_path).as_posix() == "/abs/x.wav"
