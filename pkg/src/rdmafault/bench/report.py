"""Result records and their CSV / summary renderings."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

CSV_COLUMNS = (
    "size_bytes",
    "strategy",
    "policy",
    "fault_site",
    "timeout_ns",
    "mean_us",
    "timeouts",
    "handler_invocations",
    "rapf_sent",
    "driver_ns",
    "seed",
)
_INT_COLUMNS = {"size_bytes", "timeout_ns", "seed"}
_TEXT_COLUMNS = {"strategy", "policy", "fault_site"}


@dataclass
class SizeStats:
    """Results for one transfer size. Counters are per-iteration means."""

    size_bytes: int
    strategy: str
    policy: str
    fault_site: str
    timeout_ns: int
    mean_us: float
    timeouts: float
    handler_invocations: float
    rapf_sent: float
    driver_ns: float
    seed: int
    min_us: float = 0.0
    max_us: float = 0.0
    iterations: int = 0
    fifo_pushes: float = 0.0
    fifo_dups: float = 0.0
    fifo_drops: float = 0.0
    pages_touched: float = 0.0
    driver_irq_ns: float = 0.0
    driver_tasklet_ns: float = 0.0
    handler_calls: float = 0.0

    def csv_fields(self) -> dict[str, object]:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


@dataclass
class StatsReport:
    rows: list[SizeStats]
    knobs: dict[str, object] = field(default_factory=dict)

    def row(self, size: int) -> SizeStats:
        for r in self.rows:
            if r.size_bytes == size:
                return r
        raise KeyError(size)


def _cell(v: object) -> str:
    # repr keeps floats exact so the CSV parses back to the same values
    return repr(v) if isinstance(v, float) else str(v)


def emit_rows(rows: list[SizeStats]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_cell(v) for v in r.csv_fields().values()])
    return buf.getvalue().encode()


def emit_summary(report: StatsReport) -> bytes:
    lines = ["# model knobs"]
    lines += [f"#   {k} = {v}" for k, v in sorted(report.knobs.items())]
    head = ("size", "strategy", "policy", "site", "timeout_ms", "mean_us", "min_us", "max_us",
            "timeouts", "handler", "rapf", "fifo_push", "fifo_dup", "driver_us")
    table = [head]
    for r in report.rows:
        table.append((
            str(r.size_bytes), r.strategy, r.policy, r.fault_site, f"{r.timeout_ns / 1e6:g}",
            f"{r.mean_us:.3f}", f"{r.min_us:.3f}", f"{r.max_us:.3f}", f"{r.timeouts:.2f}",
            f"{r.handler_invocations:.2f}", f"{r.rapf_sent:.2f}", f"{r.fifo_pushes:.2f}",
            f"{r.fifo_dups:.2f}", f"{r.driver_ns / 1000:.3f}",
        ))
    widths = [max(len(row[i]) for row in table) for i in range(len(head))]
    for row in table:
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return ("\n".join(lines) + "\n").encode()


def emit(report: StatsReport, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        return emit_rows(report.rows)
    if fmt == "summary":
        return emit_summary(report)
    raise ValueError(f"unknown format {fmt!r}")


def parse_csv(data: bytes) -> list[dict[str, object]]:
    rows = list(csv.DictReader(io.StringIO(data.decode())))
    out = []
    for r in rows:
        rec: dict[str, object] = {}
        for c in CSV_COLUMNS:
            v = r[c]
            if c in _TEXT_COLUMNS:
                rec[c] = v
            elif c in _INT_COLUMNS:
                rec[c] = int(v)
            else:
                rec[c] = float(v)
        out.append(rec)
    return out
