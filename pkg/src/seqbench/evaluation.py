"""AUROC, best-trial selection and benchmark reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

TASKS = ("HF", "Readm")
TASK_COLUMNS = {"HF": "hf_auroc", "Readm": "readm_auroc"}
# row order of the published table, then the extra T-LSTM row
REPORT_MODELS = (
    "GRU", "LSTM", "D-GRU", "D-LSTM", "QRNN", "RETAIN", "LR",
    "Bi-GRU", "Bi-LSTM", "Bi-RNN", "D-RNN", "Vanilla-RNN", "RF", "T-LSTM",
)


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting half.

    Computed from midranks (Mann-Whitney U) in O(n log n).
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # tie groups get the mean of the ranks they span (1-based)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    midranks = 0.5 * (starts + 1 + ends)
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(midranks, ends - starts)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


# ---------------------------------------------------------------- selection


@dataclass(frozen=True)
class Selection:
    trial: object
    valid_auroc: float
    test_auroc: float | None


def select_best(ledgers: Mapping[str, Sequence]) -> dict[str, Selection]:
    """Per architecture, the trial with the highest validation AUROC (earliest on ties).

    Test AUROC is reported for the chosen trial and never consulted when choosing.
    """
    out = {}
    for arch, trials in ledgers.items():
        ok = [t for t in trials if getattr(t, "status", "ok") == "ok"]
        if not ok:
            raise ValueError(f"no successful trial for {arch}")
        best = ok[0]
        for t in ok[1:]:
            if t.valid_auroc > best.valid_auroc:
                best = t
        out[arch] = Selection(best, best.valid_auroc, best.test_auroc)
    return out


# ---------------------------------------------------------------- reports


def percent_cell(value: float | None) -> str:
    """Render an AUROC in [0, 1] as a percentage with one decimal, rounding half up."""
    if value is None:
        return ""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"AUROC {value} outside [0, 1]")
    pct = Decimal(repr(float(value))) * 100
    return str(pct.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _task_key(task: str) -> str:
    for t in TASKS:
        if t.lower() == task.lower():
            return t
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class BenchmarkReport:
    cells: dict[tuple[str, str], float] = field(default_factory=dict)  # (model, task) -> AUROC fraction

    def rows(self) -> list[tuple[str, str, str]]:
        present = {m for m, _ in self.cells}
        extra = sorted(present - set(REPORT_MODELS))
        rows = []
        for model in [m for m in REPORT_MODELS if m in present] + extra:
            rows.append((model, *(percent_cell(self.cells.get((model, t))) for t in TASKS)))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", *(TASK_COLUMNS[t] for t in TASKS)])
        writer.writerows(self.rows())
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def make_report(results: Mapping[str, Mapping[str, float | Selection]] | Iterable = ()) -> BenchmarkReport:
    """Build a report from ``{task: {model: auroc or Selection}}``."""
    report = BenchmarkReport()
    items = results.items() if isinstance(results, Mapping) else results
    for task, per_model in items:
        key = _task_key(task)
        for model, value in per_model.items():
            if isinstance(value, Selection):
                value = value.test_auroc
            if value is None:
                continue
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"AUROC {value} for {model} outside [0, 1]")
            report.cells[(model, key)] = float(value)
    return report


def read_report_csv(text: str) -> dict[str, dict[str, float]]:
    """Parse a report CSV back into ``{task: {model: auroc fraction}}``."""
    out: dict[str, dict[str, float]] = {t: {} for t in TASKS}
    for row in csv.DictReader(io.StringIO(text)):
        for task in TASKS:
            cell = row.get(TASK_COLUMNS[task], "")
            if cell:
                out[task][row["model"]] = float(Decimal(cell) / 100)
    return out


def table1_fixture() -> dict[str, dict[str, float]]:
    """Published benchmark AUROCs, as fractions."""
    text = resources.files("seqbench").joinpath("fixtures/table1.csv").read_text(encoding="utf-8")
    return read_report_csv(text)
