"""Line-delimited run reports, aligned text tables and optional PNG figures."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from vtar.errors import ConfigError, FormatError

SCHEMA = "vtar.report/1"
WALL_CLOCK_KEYS = ("wall_clock",)


@dataclass
class RunReport:
    variant: str
    digest: str
    seed: int
    phase: str
    intervals: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def log(self, **values) -> None:
        self.intervals.append(dict(values))

    def records(self) -> list:
        head = {"schema": SCHEMA, "digest": self.digest, "variant": self.variant, "seed": self.seed,
                "phase": self.phase}
        out = [dict(head, kind="interval", **rec) for rec in self.intervals]
        out.append(dict(head, kind="summary", wall_clock=self.wall_clock, **self.summary))
        return out


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        raise FormatError(f"refusing to write non-finite value {value}", 0)
    return value


def dumps(record: dict) -> str:
    return json.dumps({k: _clean(v) for k, v in record.items()}, sort_keys=True)


def append_records(path, records: Iterable[dict]) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def write_records(path, records: Iterable[dict]) -> None:
    Path(path).write_text("".join(dumps(r) + "\n" for r in records))


def read_records(path) -> list:
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.decode().strip()
            if line:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    raise FormatError(f"{path}: line {lineno} is not JSON", offset) from None
                if not isinstance(rec, dict) or rec.get("schema") != SCHEMA:
                    raise FormatError(f"{path}: line {lineno} lacks schema {SCHEMA!r}", offset)
                out.append(rec)
            offset += len(raw)
    return out


def strip_wall_clock(records: Sequence[dict]) -> list:
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_KEYS} for r in records]


def join_reports(paths: Sequence) -> list:
    """Concatenate reports; every record must carry the same config digest."""
    records, digest, first = [], None, None
    for p in paths:
        for rec in read_records(p):
            d = rec.get("digest")
            if digest is None:
                digest, first = d, p
            elif d != digest:
                raise ConfigError(f"digest mismatch: {first} has {digest}, {p} has {d}")
            records.append(rec)
    return records


# ------------------------------------------------------------------ text tables


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_table(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    """Aligned plain-text table; numbers right-aligned, text left-aligned."""
    if not rows:
        return "(no records)\n"
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float)) or r.get(c) is None for r in rows) for c in columns]

    def line(vals):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(vals, widths, numeric)).rstrip()

    out = [line(columns), "  ".join("-" * w for w in widths)]
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def ablation_figure(means: dict, sds: dict, path, labels: Optional[dict] = None) -> None:
    """Horizontal bars of mean test accuracy per variant with sd whiskers."""
    plt = _pyplot()
    names = list(means)
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.2))
    ypos = range(len(names))
    ax.barh(list(ypos), [means[n] for n in names], xerr=[sds.get(n, 0.0) for n in names], color="0.55",
            ecolor="k", capsize=3)
    ax.set_yticks(list(ypos))
    ax.set_yticklabels([(labels or {}).get(n, n) for n in names], fontsize=8)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("held-out accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_figure(rows: Sequence[dict], path) -> None:
    """Accuracy (left axis) and codebook usage (right axis) against the swept value."""
    plt = _pyplot()
    ok = [r for r in rows if r["acc_mean"] is not None]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    if ok:
        xs = [r["value"] for r in ok]
        ax.errorbar(xs, [r["acc_mean"] for r in ok], yerr=[r["acc_sd"] or 0.0 for r in ok], marker="o",
                    color="k", capsize=3, label="accuracy")
        ax.set_xscale("log", base=2)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(x) for x in xs])
        use = [r for r in ok if r["usage_mean"] is not None]
        if use:
            ax2 = ax.twinx()
            ax2.plot([r["value"] for r in use], [r["usage_mean"] for r in use], "s--", color="0.5",
                     label="codebook usage")
            ax2.set_ylim(0, 1.05)
            ax2.set_ylabel("codebook usage")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel(rows[0]["axis"] if rows else "value")
    ax.set_ylabel("held-out accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
