"""Sweep tables: CSV reading/writing and success-vs-delay charts.

Charts are rendered with matplotlib's Agg backend.  SVG output is made
byte-deterministic by fixing the SVG id salt and dropping the date stamp.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import SchemaError  # noqa: E402

SWEEP_COLUMNS = ("method", "delta", "success_rate", "episodes", "mean_arrival", "mean_final_error")
_NUMERIC = {"delta": float, "success_rate": float, "episodes": int, "mean_arrival": float, "mean_final_error": float}
_SVG_SALT = "delaypolicy"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: Iterable[dict], path, columns: Sequence[str] = SWEEP_COLUMNS) -> Path:
    """Write ``rows`` with a fixed column order; floats use ``repr`` so output is exact and stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    """Read a sweep CSV, checking that every sweep column is present and parseable."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in SWEEP_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        rows = []
        for line, raw in enumerate(reader, start=2):
            row = dict(raw)
            for col, kind in _NUMERIC.items():
                try:
                    row[col] = kind(raw[col])
                except (TypeError, ValueError) as exc:
                    raise SchemaError(f"{path}:{line}: column {col!r} has bad value {raw[col]!r}") from exc
            rows.append(row)
    return rows


def _grid(rows: Sequence[dict]):
    methods = list(dict.fromkeys(r["method"] for r in rows))
    deltas = sorted({float(r["delta"]) for r in rows})
    table = {(r["method"], float(r["delta"])): float(r["success_rate"]) for r in rows}
    return methods, deltas, table


def success_figure(rows: Sequence[dict], kind: str = "bar", title: str | None = None):
    """Success rate against delay, one series per method.  Returns the matplotlib figure."""
    if not rows:
        raise SchemaError("no rows")
    if kind not in ("bar", "line"):
        raise ValueError(f"chart kind must be 'bar' or 'line', got {kind!r}")
    methods, deltas, table = _grid(rows)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    xs = range(len(deltas))
    width = 0.8 / len(methods)
    for i, method in enumerate(methods):
        ys = [table.get((method, d), math.nan) for d in deltas]
        if kind == "bar":
            pts = [(x, y) for x, y in zip(xs, ys) if not math.isnan(y)]
            ax.bar([x - 0.4 + width * (i + 0.5) for x, _ in pts], [y for _, y in pts], width, label=method)
        else:
            ax.plot(list(xs), ys, marker="o", label=method)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{d * 1000:g}" for d in deltas])
    ax.set_xlabel("inference delay (ms)")
    ax.set_ylabel("success rate")
    ax.set_ylim(0.0, 1.05)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> Path:
    """Save ``fig`` by extension (``.svg`` or ``.png``) and close it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    with plt.rc_context({"svg.hashsalt": _SVG_SALT, "svg.fonttype": "path"}):
        if suffix == ".svg":
            fig.savefig(path, format="svg", metadata={"Date": None})
        elif suffix == ".png":
            fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
        else:
            plt.close(fig)
            raise ValueError(f"unsupported figure format {suffix!r}")
    plt.close(fig)
    return path


def plot_csv(csv_path, out_path=None, kind: str = "bar", title: str | None = None) -> Path:
    """Render a sweep CSV to an SVG next to it (or at ``out_path``)."""
    rows = read_csv(csv_path)
    out = Path(out_path) if out_path else Path(csv_path).with_suffix(".svg")
    return save_figure(success_figure(rows, kind, title), out)
