"""Orchestration of external codec, error-insertion and PESQ tools.

Nothing here implements a codec. The caller supplies command templates for
each stage; this module substitutes placeholders, runs the commands in the
right order and records exit codes and output hashes.

Stages and their placeholders:

``FILTER``  ``{input} {output}``           optional pre-coding filter
``ENC``     ``{input} {output} {bitrate} {codec} {bits14}``
``EID``     ``{input} {output} {pattern}``  only when the record has fer > 0
``DEC``     ``{input} {output} {bitrate} {codec} {bits14}``
``PESQ``    ``{reference} {degraded}``      optional; the last number printed is the score

A stage may be given per codec as ``"ENC:AMR-WB"``; the bare ``"ENC"`` key is
the fallback. Templates are split with :func:`shlex.split` before
substitution, so paths containing spaces are safe.
"""
from __future__ import annotations

import hashlib
import re
import shlex
import shutil
import string
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import UtteranceRecord
from .errors import ExternalToolError, ValidationError

ALLOWED = {
    "FILTER": {"input", "output"},
    "ENC": {"input", "output", "bitrate", "codec", "bits14"},
    "EID": {"input", "output", "pattern"},
    "DEC": {"input", "output", "bitrate", "codec", "bits14"},
    "PESQ": {"reference", "degraded"},
}
REQUIRED = {
    "FILTER": {"input", "output"},
    "ENC": {"input", "output"},
    "EID": {"input", "output", "pattern"},
    "DEC": {"input", "output"},
    "PESQ": {"reference", "degraded"},
}
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


@dataclass
class ChainConfig:
    templates: Mapping[str, str]
    bits14_codecs: Sequence[str] = ("G.722",)
    bits14_flag: str = ""  # text substituted for {bits14} on 14-bit codecs
    timeout: float | None = None


@dataclass
class ChainResult:
    record_id: str
    output_path: Path
    pesq: float | None
    stages: list[dict] = field(default_factory=list)


def _placeholders(template: str) -> set[str]:
    names = set()
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None:
            if name == "" or not name.isidentifier():
                raise ValidationError(f"bad placeholder {{{name}}} in template {template!r}")
            names.add(name)
    return names


def _template(templates: Mapping[str, str], stage: str, codec: str | None) -> str | None:
    if codec is not None and f"{stage}:{codec}" in templates:
        return templates[f"{stage}:{codec}"]
    return templates.get(stage)


def planned_stages(record: UtteranceRecord, with_pesq: bool) -> list[tuple[str, str | None]]:
    """(stage, codec) pairs in execution order.

    Tandem chains run ENC then DEC for each codec in declared order. Frame
    erasures are inserted into the bitstream of the last codec in the chain.
    """
    plan: list[tuple[str, str | None]] = []
    chain = record.chain
    for k, codec in enumerate(chain):
        plan.append(("ENC", codec))
        if record.fer > 0 and k == len(chain) - 1:
            plan.append(("EID", codec))
        plan.append(("DEC", codec))
    if with_pesq:
        plan.append(("PESQ", None))
    return plan


def validate_templates(record: UtteranceRecord, config: ChainConfig, with_pesq: bool = False) -> None:
    """Dry run: every needed stage has a template with exactly the allowed placeholders."""
    unknown_keys = [k for k in config.templates if k.split(":", 1)[0] not in ALLOWED]
    if unknown_keys:
        raise ValidationError(f"unknown template stages: {sorted(unknown_keys)}")
    if record.fer > 0 and not record.chain:
        raise ValidationError(f"{record.id}: frame erasures need a codec chain")
    needed = planned_stages(record, with_pesq)
    if "FILTER" in config.templates:
        needed = [("FILTER", None)] + needed
    for stage, codec in needed:
        tpl = _template(config.templates, stage, codec)
        label = stage if codec is None else f"{stage}:{codec}"
        if tpl is None:
            raise ValidationError(f"{record.id}: no template for stage {label}")
        names = _placeholders(tpl)
        extra = names - ALLOWED[stage]
        missing = REQUIRED[stage] - names
        if extra:
            raise ValidationError(f"{label}: unknown placeholders {sorted(extra)}")
        if missing:
            raise ValidationError(f"{label}: missing placeholders {sorted(missing)}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _run(stage: str, template: str, values: dict, timeout: float | None) -> subprocess.CompletedProcess:
    argv = [tok.format(**values) for tok in shlex.split(template)]
    argv = [a for a in argv if a != ""]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as e:
        raise ExternalToolError(stage, f"command not found: {argv[0]}") from e
    except subprocess.TimeoutExpired as e:
        raise ExternalToolError(stage, f"timed out after {timeout} s") from e
    if proc.returncode != 0:
        raise ExternalToolError(stage, f"exit code {proc.returncode}: {proc.stderr.strip()[:500]}")
    return proc


def run_external_chain(record: UtteranceRecord, config: ChainConfig, input_path, work_dir,
                       pattern_path=None, with_pesq: bool = False) -> ChainResult:
    """Run FILTER, then ENC/EID/DEC per codec, then optionally PESQ against the input."""
    validate_templates(record, config, with_pesq)
    if record.fer > 0 and pattern_path is None:
        raise ValidationError(f"{record.id}: fer > 0 but no erasure pattern supplied")
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    reference = Path(input_path)
    current = reference
    stages: list[dict] = []

    def step(stage: str, codec: str | None, out: Path, extra: dict) -> None:
        nonlocal current
        tpl = _template(config.templates, stage, codec)
        values = {"input": str(current), "output": str(out), "codec": codec or "",
                  "bitrate": "" if record.bitrate is None else f"{record.bitrate:g}",
                  "bits14": config.bits14_flag if codec in config.bits14_codecs else "", **extra}
        proc = _run(stage, tpl, values, config.timeout)
        if not out.exists():
            raise ExternalToolError(stage, f"expected output {out} was not written")
        stages.append({"stage": stage if codec is None else f"{stage}:{codec}",
                       "exit_code": proc.returncode, "output": str(out), "sha256": sha256_file(out)})
        current = out

    if "FILTER" in config.templates:
        step("FILTER", None, work / f"{record.id}.filt.wav", {})
        reference = current
    for k, (stage, codec) in enumerate(planned_stages(record, with_pesq=False)):
        ext = {"ENC": "bit", "EID": "err.bit", "DEC": "wav"}[stage]
        extra = {"pattern": str(pattern_path)} if stage == "EID" else {}
        step(stage, codec, work / f"{record.id}.{k}.{codec}.{ext}", extra)
    final = work / f"{record.id}.coded.wav"
    shutil.copyfile(current, final)
    pesq = None
    if with_pesq:
        tpl = _template(config.templates, "PESQ", None)
        proc = _run("PESQ", tpl, {"reference": str(reference), "degraded": str(final)}, config.timeout)
        found = _NUMBER.findall(proc.stdout)
        if not found:
            raise ExternalToolError("PESQ", "no score found in tool output")
        pesq = float(found[-1])
        stages.append({"stage": "PESQ", "exit_code": proc.returncode, "score": pesq})
    record.tools = stages
    return ChainResult(record.id, final, pesq, stages)


def run_external_batch(jobs: Sequence[tuple[UtteranceRecord, object, object, object]], config: ChainConfig,
                       workers: int = 1, with_pesq: bool = False) -> list[ChainResult]:
    """Run many chains with at most ``workers`` concurrent tool invocations.

    ``jobs`` holds ``(record, input_path, work_dir, pattern_path)`` tuples.
    Every template is validated before anything runs. Results keep job order.
    """
    for rec, *_ in jobs:
        validate_templates(rec, config, with_pesq)
    if workers <= 1:
        return [run_external_chain(r, config, i, w, p, with_pesq) for r, i, w, p in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(run_external_chain, r, config, i, w, p, with_pesq) for r, i, w, p in jobs]
        return [f.result() for f in futs]
