"""Evaluation metrics and per-condition reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import JoinError, UndefinedCorrelationError, ValidationError


def _pair(estimates, targets) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(estimates, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if e.size != t.size:
        raise ValidationError(f"length mismatch: {e.size} estimates vs {t.size} targets")
    if e.size == 0:
        raise ValidationError("metrics need at least one utterance")
    return e, t


def mae(estimates, targets) -> float:
    e, t = _pair(estimates, targets)
    return float(np.mean(np.abs(e - t)))


def lcc(estimates, targets) -> float:
    """Pearson linear correlation; raises on fewer than two points or a constant vector."""
    e, t = _pair(estimates, targets)
    if e.size < 2:
        raise UndefinedCorrelationError("correlation needs at least two utterances")
    de = e - e.mean()
    dt = t - t.mean()
    se = math.sqrt(float(np.dot(de, de)))
    st = math.sqrt(float(np.dot(dt, dt)))
    if se == 0.0 or st == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    r = float(np.dot(de, dt)) / (se * st)
    return max(-1.0, min(1.0, r))


CONDITION_KEYS = ("codec", "bitrate", "fer", "snr_db", "tandem")


@dataclass
class ReportRow:
    group: str
    value: str
    n: int
    mae: float
    lcc: float | None  # None when undefined

    def lcc_text(self) -> str:
        return "undefined" if self.lcc is None else f"{self.lcc:.4f}"


def _safe_lcc(e, t) -> float | None:
    try:
        return lcc(e, t)
    except UndefinedCorrelationError:
        return None


def _fmt_value(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:g}"
    if isinstance(v, (list, tuple)):
        return ">".join(str(x) for x in v) or "none"
    return "none" if v is None else str(v)


def condition_report(records: Sequence[Mapping], predictions: Mapping[str, float],
                     keys: Iterable[str] = CONDITION_KEYS) -> list[ReportRow]:
    """MAE/LCC per condition value plus a pooled "Total" row.

    ``records`` are manifest rows (mappings with ``id``, ``pesq_target`` and
    condition fields); ``predictions`` maps utterance id to estimate. The
    total is computed over all rows at once, never by averaging group
    metrics.
    """
    by_id = {r["id"]: r for r in records}
    missing = [u for u in predictions if u not in by_id]
    if missing:
        raise JoinError(f"predictions without manifest rows: {sorted(missing)}")
    ids = list(predictions)
    no_target = [u for u in ids if by_id[u].get("pesq_target") is None]
    if no_target:
        raise ValidationError(f"manifest rows without pesq_target: {sorted(no_target)}")
    est = np.array([predictions[u] for u in ids], dtype=np.float64)
    tgt = np.array([by_id[u]["pesq_target"] for u in ids], dtype=np.float64)
    rows: list[ReportRow] = []
    for key in keys:
        groups: dict[str, list[int]] = {}
        for i, u in enumerate(ids):
            groups.setdefault(_fmt_value(by_id[u].get(key)), []).append(i)
        for value in sorted(groups):
            idx = groups[value]
            rows.append(ReportRow(key, value, len(idx), mae(est[idx], tgt[idx]), _safe_lcc(est[idx], tgt[idx])))
    rows.append(ReportRow("Total", "all", len(ids), mae(est, tgt), _safe_lcc(est, tgt)))
    return rows


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "value", "n", "mae", "lcc"])
    for r in rows:
        w.writerow([r.group, r.value, r.n, f"{r.mae:.6f}", "" if r.lcc is None else f"{r.lcc:.6f}"])
    return buf.getvalue()


def report_text(rows: Sequence[ReportRow]) -> str:
    table = [("group", "value", "n", "MAE", "LCC")]
    table += [(r.group, r.value, str(r.n), f"{r.mae:.4f}", r.lcc_text()) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(5)]
    lines = []
    for k, row in enumerate(table):
        lines.append("  ".join(c.ljust(widths[i]) if i < 2 else c.rjust(widths[i]) for i, c in enumerate(row)))
        if k == 0:
            lines.append("  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"
