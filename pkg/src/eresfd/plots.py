"""Matplotlib figure rendering for the report paths.

Each CSV report the CLI writes gets a sibling PNG: latency sweeps as
per-variant lines, cost and latency breakdowns as per-group bars.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import GraphBenchResult, SweepResult  # noqa: E402
from .costmodel import CostReport, GroupLatency  # noqa: E402


def sweep_figure(result: SweepResult, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = sorted({r.variant for r in result.rows},
                      key=[r.variant for r in result.rows].index)
    for variant in variants:
        pts = [(r.axis_value, r.median_ms) for r in result.rows if r.variant == variant]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=variant)
    ax.set_xlabel(result.axis)
    ax.set_ylabel("median latency (ms)")
    ax.set_title(f"latency vs {result.axis} "
                 f"(threads={result.meta.get('threads')})")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cost_figure(report: CostReport, path: str) -> None:
    groups = report.group_totals()
    names = [g for g in groups if g != "input"]
    macs = [groups[g]["macs"] / 1e6 for g in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, macs)
    ax.set_ylabel("MACs (millions)")
    ax.set_title(f"per-group compute at {report.input_shape.h}x{report.input_shape.w}")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def breakdown_figure(rows: list[GroupLatency], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([r.group for r in rows], [r.ms for r in rows])
    for i, r in enumerate(rows):
        ax.text(i, r.ms, f"{r.share_pct:.1f}%", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("median latency (ms)")
    ax.set_title("per-group latency")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def graph_bench_figure(result: GraphBenchResult, groups: dict[str, str],
                       path: str) -> None:
    totals: dict[str, float] = {}
    for nid, stats in result.nodes.items():
        g = groups.get(nid, nid.split(".", 1)[0])
        totals[g] = totals.get(g, 0.0) + stats.median_ms
    grand = sum(totals.values()) or 1.0
    rows = [GroupLatency(group=g, ms=ms, share_pct=100.0 * ms / grand)
            for g, ms in totals.items()]
    breakdown_figure(rows, path)
