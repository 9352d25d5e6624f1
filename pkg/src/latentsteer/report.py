"""Run artifacts: the append-only event log, delimited loss tables, and
rendered loss-curve figures.

The event log is the canonical record of a run — one compact JSON
object per line, no wall-clock data, so identical runs produce
byte-identical logs.  ``losses.csv`` and ``loss_curve.png`` are derived
from it when a run finishes (floats are written with repr, so the CSV
round-trips exactly).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from matplotlib.figure import Figure

from .pipeline import LossReport

CSV_FIELDS = ("iteration", "l_clip", "l_reg", "total")


# ---------------------------------------------------------------------------
# event log

def event_line(event: str, data: dict) -> str:
    return json.dumps({"event": event, "data": data}, separators=(",", ":"))


def append_event(path, event: str, data: dict) -> None:
    with open(path, "a") as fh:
        fh.write(event_line(event, data) + "\n")


def read_events(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def losses_from_events(path) -> list[LossReport]:
    out = []
    for record in read_events(path):
        if record.get("event") != "loss":
            continue
        d = record["data"]
        out.append(LossReport(iteration=int(d["iteration"]),
                              l_clip=float(d["l_clip"]),
                              l_reg=float(d["l_reg"]),
                              total=float(d["total"])))
    return out


# ---------------------------------------------------------------------------
# delimited table + figure

def write_losses_csv(path, reports: list[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in reports:
            writer.writerow([r.iteration, repr(r.l_clip), repr(r.l_reg),
                             repr(r.total)])


def read_losses_csv(path) -> list[LossReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(LossReport(
                iteration=int(row["iteration"]),
                l_clip=float(row["l_clip"]),
                l_reg=float(row["l_reg"]),
                total=float(row["total"])))
    return out


def render_loss_curve(reports: list[LossReport], path) -> None:
    # matplotlib's object API only: no pyplot globals, so concurrent
    # workers can render without stepping on each other
    fig = Figure(figsize=(7.0, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    its = [r.iteration for r in reports]
    ax.plot(its, [r.total for r in reports], label="total", linewidth=1.5)
    ax.plot(its, [r.l_clip for r in reports], label="guidance", linewidth=1.0)
    ax.plot(its, [r.l_reg for r in reports], label="regularizer",
            linewidth=1.0, linestyle="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100)


def write_run_report(out_dir, events_path=None) -> list[LossReport]:
    """The standard pair derived from a run's event log: ``losses.csv``
    next to its rendered ``loss_curve.png``."""
    out_dir = Path(out_dir)
    reports = losses_from_events(events_path or out_dir / "events.jsonl")
    write_losses_csv(out_dir / "losses.csv", reports)
    if reports:
        render_loss_curve(reports, out_dir / "loss_curve.png")
    return reports
