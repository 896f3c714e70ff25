"""Timing harness and benchmark report rows.

Every row records the full parameter set needed to rerun it.  CSV columns
appear in :data:`COLUMNS` order; JSON output is an object with
``"schema": 1`` and a ``"rows"`` list.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from typing import Any

SCHEMA_VERSION = 1
MIN_REPEATS = 3
MIN_WARMUP = 1

COLUMNS = ("workload", "stage", "backend", "shape", "params", "repeats", "warmup",
           "median_s", "speedup_vs_reference")


@dataclass
class TimingRow:
    workload: str
    stage: str
    backend: str
    shape: tuple[int, ...]
    params: dict[str, Any]
    repeats: int
    warmup: int
    median_s: float
    speedup_vs_reference: float | None = None

    def csv_cells(self) -> list[str]:
        speed = "" if self.speedup_vs_reference is None else f"{self.speedup_vs_reference:.4f}"
        return [self.workload, self.stage, self.backend, "x".join(map(str, self.shape)),
                json.dumps(self.params, sort_keys=True), str(self.repeats), str(self.warmup),
                f"{self.median_s:.6f}", speed]


@dataclass
class TimingReport:
    rows: list[TimingRow] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def add(self, row: TimingRow) -> None:
        self.rows.append(row)

    def fill_speedups(self) -> None:
        """speedup = reference median / row median, matched on everything but backend."""
        ref = {_key(r): r.median_s for r in self.rows if r.backend == "reference"}
        for r in self.rows:
            base = ref.get(_key(r))
            if base is not None and r.median_s > 0:
                r.speedup_vs_reference = base / r.median_s

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_cells())
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            d = asdict(r)
            d["shape"] = list(r.shape)
            rows.append(d)
        return json.dumps({"schema": SCHEMA_VERSION, "rows": rows, **self.extra}, indent=2, sort_keys=True,
                          default=_jsonable)

    def render(self, fmt: str) -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        raise ValueError(f"unknown format {fmt!r}")


def _key(r: TimingRow) -> tuple:
    return (r.workload, r.stage, tuple(r.shape), json.dumps(r.params, sort_keys=True, default=_jsonable))


def _jsonable(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def time_call(fn: Callable[[], Any], repeats: int = MIN_REPEATS, warmup: int = MIN_WARMUP) -> tuple[float, Any]:
    """Median wall time of `fn` over `repeats` runs after `warmup` discarded runs.

    Returns ``(median_seconds, last_result)``.
    """
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    result = None
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), result
