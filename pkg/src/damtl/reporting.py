"""Result files: metrics CSV, accuracy summaries, provenance records.

All files are written atomically (temp file in the target directory, then
rename). Floats are rendered with repr, the shortest exact round-trip form,
so a deterministic training run produces byte-identical files. The metrics
``seconds`` column is 0.0 unless timings were explicitly requested: measured
wall time would break the same-seed byte-identity contract, so real timings
live in run.json instead.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

METRICS_HEADER = "epoch,task,ce,l1,cmmd,total,train_acc,test_acc,seconds"


def atomic_write_bytes(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(v: float) -> str:
    return repr(float(v))


def metrics_csv_text(rows, record_timings: bool = False) -> str:
    """Render EpochMetrics rows ordered by (epoch, task)."""
    lines = [METRICS_HEADER]
    for m in sorted(rows, key=lambda m: (m.epoch, m.task)):
        seconds = m.seconds if record_timings else 0.0
        lines.append(
            f"{m.epoch},{m.task},{_fmt(m.ce)},{_fmt(m.l1)},{_fmt(m.cmmd)},{_fmt(m.total)},"
            f"{_fmt(m.train_acc)},{_fmt(m.test_acc)},{_fmt(seconds)}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows, record_timings: bool = False) -> None:
    atomic_write_text(path, metrics_csv_text(rows, record_timings))


@dataclass(frozen=True)
class RunAccuracy:
    """One completed run's test accuracy for one task."""

    task: int
    mode: str
    seed: int
    accuracy: float


@dataclass(frozen=True)
class SummaryRow:
    task: int
    mode: str
    runs: int
    mean: float
    std: float  # population standard deviation over seeds


def summarize_runs(records) -> list:
    """Per (task, mode): mean and population std of test accuracy over runs."""
    records = list(records)
    if not records:
        raise ValueError("summarize_runs needs at least one run record")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.task, r.mode), []).append(r.accuracy)
    rows = []
    for (task, mode) in sorted(groups):
        accs = groups[(task, mode)]
        mean = sum(accs) / len(accs)
        var = sum((a - mean) ** 2 for a in accs) / len(accs)
        rows.append(SummaryRow(task, mode, len(accs), mean, var**0.5))
    return rows


def summary_csv_text(rows) -> str:
    lines = ["task,mode,runs,mean_test_acc,std_test_acc"]
    for r in rows:
        lines.append(f"{r.task},{r.mode},{r.runs},{_fmt(r.mean)},{_fmt(r.std)}")
    return "\n".join(lines) + "\n"


def summary_table_text(rows) -> str:
    """Aligned text rendering of the accuracy summary."""
    mode_w = max([len(r.mode) for r in rows] + [4])
    lines = [f"{'task':>4}  {'mode':<{mode_w}}  {'runs':>4}  {'mean':>7}  {'std':>7}"]
    for r in rows:
        lines.append(f"{r.task:>4}  {r.mode:<{mode_w}}  {r.runs:>4}  {r.mean:>7.4f}  {r.std:>7.4f}")
    return "\n".join(lines) + "\n"


def config_hash(resolved: dict) -> str:
    """SHA-256 of the canonical JSON form of the effective settings."""
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


def write_run_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
