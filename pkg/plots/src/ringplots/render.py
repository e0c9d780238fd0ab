"""Figure rendering for benchmark CSV files.

The CSV is the only contract with the protocol kit: a comment line with
run metadata, a fixed header, one record per report interval, and a final
summary row carrying the efficiency figure.  Everything here validates the
schema before touching the data, renders deterministically for identical
inputs, and never mutates its inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

EXPECTED_COLUMNS = [
    "ts_s", "msgs_per_s", "mbits_per_s", "p50_us", "p99_us",
    "window", "drops", "cpu_pct", "rss_mb", "efficiency",
]

KINDS = ("flowcontrol-timeline", "throughput-vs-n", "latency-vs-size")


class SchemaError(ValueError):
    """Input CSV does not match the benchmark schema."""


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    inputs: tuple[str, ...]
    out: str
    log_y: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(
                f"unknown figure kind {self.kind!r}; expected one of {KINDS}"
            )
        if not self.inputs:
            raise SchemaError("at least one input CSV is required")


@dataclass
class BenchCsv:
    path: str
    meta: dict
    rows: list[dict]  # interval records, numeric fields parsed
    efficiency: float | None = None

    @property
    def label(self) -> str:
        proto = self.meta.get("protocol", Path(self.path).stem)
        return proto

    def series(self, column: str) -> tuple[list[float], list[float]]:
        xs = [r["ts_s"] for r in self.rows]
        ys = [r[column] for r in self.rows]
        return xs, ys

    def steady_mean(self, column: str, warmup: int = 2) -> float:
        vals = [r[column] for r in self.rows][warmup:]
        if not vals:
            return 0.0
        return sum(vals) / len(vals)


def load_csv(path) -> BenchCsv:
    meta: dict = {}
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            parts = first.lstrip("# ").split()
            for kv in parts:
                if "=" in kv:
                    k, _, v = kv.partition("=")
                    meta[k] = v
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in EXPECTED_COLUMNS if c not in header]
        extra = [c for c in header if c not in EXPECTED_COLUMNS]
        if missing or extra:
            details = []
            if missing:
                details.append(f"missing column(s): {', '.join(missing)}")
            if extra:
                details.append(f"unexpected column(s): {', '.join(extra)}")
            raise SchemaError(f"{path}: {'; '.join(details)}")
        idx = {c: header.index(c) for c in EXPECTED_COLUMNS}
        rows = []
        efficiency = None
        for lineno, rec in enumerate(reader, 3):
            if len(rec) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, "
                    f"got {len(rec)}"
                )
            if rec[idx["msgs_per_s"]] == "":
                if rec[idx["efficiency"]]:
                    efficiency = float(rec[idx["efficiency"]])
                continue
            try:
                rows.append({
                    "ts_s": float(rec[idx["ts_s"]]),
                    "msgs_per_s": float(rec[idx["msgs_per_s"]]),
                    "mbits_per_s": float(rec[idx["mbits_per_s"]]),
                    "p50_us": float(rec[idx["p50_us"]]),
                    "p99_us": float(rec[idx["p99_us"]]),
                    "window": float(rec[idx["window"]]),
                    "drops": float(rec[idx["drops"]]),
                })
            except ValueError as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from None
    times = [r["ts_s"] for r in rows]
    if times != sorted(times):
        raise SchemaError(f"{path}: timestamps are not monotone")
    return BenchCsv(str(path), meta, rows, efficiency)


def _new_axes():
    fig, ax = plt.subplots(figsize=(7.0, 4.0), dpi=120)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _flow_timeline(spec, datasets):
    fig, ax = _new_axes()
    for ds in datasets:
        xs, ys = ds.series("msgs_per_s")
        ax.plot(xs, ys, lw=1.4, label=f"{ds.label} delivered/s")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("delivered messages/s")
    if spec.log_y:
        ax.set_yscale("log")
    ax2 = ax.twinx()
    for ds in datasets:
        xs, ys = ds.series("window")
        ax2.plot(xs, ys, lw=1.0, ls="--", color="tab:red",
                 label=f"{ds.label} window")
        slow = ds.meta.get("slow_learner")
        if slow:
            ax2.set_title(f"flow control (slowed learner: {slow})")
    ax2.set_ylabel("window (outstanding instances)")
    lines, labels = ax.get_legend_handles_labels()
    l2, lb2 = ax2.get_legend_handles_labels()
    ax.legend(lines + l2, labels + lb2, loc="lower right", fontsize=8)
    return fig


def _throughput_vs_n(spec, datasets):
    fig, ax = _new_axes()
    by_proto: dict[str, list] = {}
    for ds in datasets:
        n = int(ds.meta.get("receivers", 0))
        by_proto.setdefault(ds.label, []).append(
            (n, ds.steady_mean("mbits_per_s"))
        )
    for proto, pts in sorted(by_proto.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=proto)
    ax.set_xlabel("receivers")
    ax.set_ylabel("throughput (Mbit/s)")
    if spec.log_y:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    return fig


def _latency_vs_size(spec, datasets):
    fig, ax = _new_axes()
    by_proto: dict[str, list] = {}
    for ds in datasets:
        size = int(ds.meta.get("msg_size", 0))
        by_proto.setdefault(ds.label, []).append(
            (size, ds.steady_mean("p50_us"), ds.steady_mean("p99_us"))
        )
    for proto, pts in sorted(by_proto.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ax.plot(xs, [p[1] for p in pts], marker="o", label=f"{proto} p50")
        ax.plot(xs, [p[2] for p in pts], marker="s", ls="--",
                label=f"{proto} p99")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("message size (bytes)")
    ax.set_ylabel("latency (us)")
    if spec.log_y:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    return fig


_RENDERERS = {
    "flowcontrol-timeline": _flow_timeline,
    "throughput-vs-n": _throughput_vs_n,
    "latency-vs-size": _latency_vs_size,
}


def render(spec: PlotSpec) -> list[BenchCsv]:
    """Validate inputs, draw the figure, write the image.

    Returns the parsed datasets so callers can assert on exactly what was
    drawn.  Identical inputs render identical figures; empty interval data
    still produces a figure (with a warning annotation) so pipelines do not
    break on an idle run.
    """
    datasets = [load_csv(p) for p in spec.inputs]
    fig = _RENDERERS[spec.kind](spec, datasets)
    if all(not ds.rows for ds in datasets):
        fig.axes[0].annotate(
            "no interval records in input",
            xy=(0.5, 0.5), xycoords="axes fraction", ha="center",
            fontsize=11, color="tab:orange",
        )
    fig.savefig(spec.out, metadata={"Software": None}
                if spec.out.endswith(".png") else None)
    plt.close(fig)
    return datasets
