"""Deterministic CPU microbenchmarks for layers, blocks and whole graphs.

The protocol: seeded random weights and inputs, a warmup phase whose
samples are discarded, then `measure_iters` timed runs.  The median is
the headline estimator (robust to OS jitter).  Every report embeds the
thread count, CPU model string and iteration counts.
"""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import builders, costmodel, graph as graphmod, kernels, weights as weightsmod
from .graph import GraphBuilder, LayerNode, ModelGraph
from .kernels import ConvSpec
from .tensor import Shape

LAYER_PAIR = ("std_conv", "dws_conv")
BLOCK_PAIR = ("res_block", "inv_res_block")
SWEEP_AXES = ("channels", "input_size", "width_multiplier")


@dataclass(frozen=True)
class BenchConfig:
    input_shape: Shape = Shape(1, 16, 16, 16)
    warmup_iters: int = 20
    measure_iters: int = 100
    threads: int = 1  # 1 = deterministic mode
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1")
        if self.measure_iters < 3:
            raise ValueError("measure_iters must be >= 3")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class LatencyStats:
    median_ms: float
    mean_ms: float
    p95_ms: float
    stddev_ms: float
    iters: int

    @classmethod
    def from_samples(cls, samples_ms: Sequence[float]) -> "LatencyStats":
        s = sorted(samples_ms)
        return cls(
            median_ms=statistics.median(s),
            mean_ms=statistics.fmean(s),
            p95_ms=float(np.percentile(s, 95)),
            stddev_ms=statistics.pstdev(s) if len(s) > 1 else 0.0,
            iters=len(s),
        )


def cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine() or "unknown"


def _meta(cfg: BenchConfig, **extra) -> dict:
    m = {"cpu": cpu_model(), "threads": cfg.threads,
         "warmup_iters": cfg.warmup_iters, "measure_iters": cfg.measure_iters,
         "seed": cfg.seed}
    m.update(extra)
    return m


def time_callable(fn: Callable[[], object], cfg: BenchConfig) -> LatencyStats:
    """Warm up, then collect measure_iters wall-clock samples of fn()."""
    with kernels.thread_limit(cfg.threads):
        for _ in range(cfg.warmup_iters):
            fn()
        samples = []
        for _ in range(cfg.measure_iters):
            t0 = time.perf_counter_ns()
            fn()
            samples.append((time.perf_counter_ns() - t0) / 1e6)
    return LatencyStats.from_samples(samples)


# ---------------------------------------------------------------------------
# single nodes and sweep variants

def bench_node(node: LayerNode, cfg: BenchConfig) -> LatencyStats:
    """Time one layer node with seeded random weights and input."""
    gb = GraphBuilder(input_channels=cfg.input_shape.c)
    gb.nodes.append(node)
    if node.inputs != ["input"]:
        raise ValueError("bench_node expects a node reading directly from 'input'")
    g = gb.graph({"out": node.id})
    store = weightsmod.init_random_weights(g, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    x = rng.normal(0, 1, cfg.input_shape).astype(np.float32)
    return time_callable(lambda: graphmod.execute_node(node, [x], store), cfg)


def variant_graph(variant: str, channels: int) -> ModelGraph:
    """Benchmark subjects: a 3x3 standard conv, the depthwise-separable
    pair (3x3 depthwise + 1x1 pointwise), and the two block types."""
    if variant == "std_conv":
        gb = GraphBuilder(input_channels=channels)
        out = gb.conv("stage1.conv", "input",
                      ConvSpec(kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                               in_channels=channels, out_channels=channels))
        return gb.graph({"out": out})
    if variant == "dws_conv":
        gb = GraphBuilder(input_channels=channels)
        dw = gb.conv("stage1.dw", "input",
                     ConvSpec(kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                              in_channels=channels, out_channels=channels,
                              groups=channels))
        pw = gb.conv("stage1.pw", dw,
                     ConvSpec(kernel=(1, 1), stride=(1, 1), padding=(0, 0),
                              in_channels=channels, out_channels=channels))
        return gb.graph({"out": pw})
    if variant == "res_block":
        return builders.residual_block_graph(channels)
    if variant == "inv_res_block":
        return builders.inverted_residual_block_graph(channels, expansion=6)
    raise ValueError(f"unknown benchmark variant {variant!r}")


@dataclass
class SweepRow:
    axis_value: float
    variant: str
    median_ms: float
    macs: int


@dataclass
class SweepResult:
    axis: str
    rows: list[SweepRow]
    meta: dict = field(default_factory=dict)

    def to_csv(self, f) -> None:
        for k, v in self.meta.items():
            f.write(f"# {k}={v}\n")
        w = csv.writer(f)
        w.writerow(["axis_value", "variant", "median_ms", "macs"])
        for r in self.rows:
            w.writerow([r.axis_value, r.variant, f"{r.median_ms:.6f}", r.macs])

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "meta": self.meta,
                           "rows": [r.__dict__ for r in self.rows]}, indent=2)


def bench_sweep(axis: str, values: Sequence[float], variants: Sequence[str],
                cfg: BenchConfig) -> SweepResult:
    """Latency sweep over channels / input size / width multiplier for the
    chosen variants; each row also carries the variant's MAC count."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep values must be non-empty")
    rng = np.random.default_rng(cfg.seed + 1)
    rows: list[SweepRow] = []
    for value in values:
        if axis == "channels":
            channels, hw = int(value), (cfg.input_shape.h, cfg.input_shape.w)
        elif axis == "input_size":
            channels, hw = cfg.input_shape.c, (int(value), int(value))
        else:
            channels = max(1, round(builders.BASE_CHANNELS * float(value)))
            hw = (cfg.input_shape.h, cfg.input_shape.w)
        shape = Shape(cfg.input_shape.n, channels, *hw)
        x = rng.normal(0, 1, shape).astype(np.float32)
        for variant in variants:
            g = variant_graph(variant, channels)
            store = weightsmod.init_random_weights(g, cfg.seed)
            stats = time_callable(lambda: graphmod.forward(g, store, x), cfg)
            macs = costmodel.analyze(g, shape).total_macs
            rows.append(SweepRow(axis_value=float(value), variant=variant,
                                 median_ms=stats.median_ms, macs=macs))
    return SweepResult(axis=axis, rows=rows,
                       meta=_meta(cfg, axis=axis, input_shape=tuple(cfg.input_shape)))


# ---------------------------------------------------------------------------
# whole graphs

@dataclass
class GraphBenchResult:
    total: LatencyStats
    nodes: dict[str, LatencyStats]
    node_kinds: dict[str, str]
    overhead_ms: float  # total median minus the sum of per-node medians
    meta: dict = field(default_factory=dict)

    def node_medians(self) -> dict[str, float]:
        return {nid: s.median_ms for nid, s in self.nodes.items()}

    def to_csv(self, f) -> None:
        for k, v in self.meta.items():
            f.write(f"# {k}={v}\n")
        f.write(f"# total_median_ms={self.total.median_ms:.6f}\n")
        f.write(f"# dispatch_overhead_ms={self.overhead_ms:.6f}\n")
        w = csv.writer(f)
        w.writerow(["node_id", "kind", "median_ms", "mean_ms", "p95_ms",
                    "stddev_ms", "iters"])
        for nid, s in self.nodes.items():
            w.writerow([nid, self.node_kinds[nid], f"{s.median_ms:.6f}",
                        f"{s.mean_ms:.6f}", f"{s.p95_ms:.6f}",
                        f"{s.stddev_ms:.6f}", s.iters])

    def to_json(self) -> str:
        return json.dumps({
            "meta": self.meta,
            "total": self.total.__dict__,
            "dispatch_overhead_ms": self.overhead_ms,
            "nodes": {nid: dict(kind=self.node_kinds[nid], **s.__dict__)
                      for nid, s in self.nodes.items()},
        }, indent=2)


def bench_graph(graph: ModelGraph, store: Mapping[str, np.ndarray] | None,
                cfg: BenchConfig) -> GraphBenchResult:
    """Time the whole forward pass, then each node in isolation.

    Per-node timings replay single nodes on inputs recorded from one
    untimed forward pass, so the timed total runs without any probes.
    """
    if store is None:
        store = weightsmod.init_random_weights(graph, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    shape = Shape(cfg.input_shape.n, graph.input_spec.c,
                  cfg.input_shape.h, cfg.input_shape.w)
    x = rng.normal(0, 1, shape).astype(np.float32)

    total = time_callable(lambda: graphmod.forward_trace(graph, store, x), cfg)

    env = graphmod.forward_trace(graph, store, x)
    node_stats: dict[str, LatencyStats] = {}
    node_kinds: dict[str, str] = {}
    for node in graph.nodes:
        if node.kind == "input":
            continue
        ins = [env[i] for i in node.inputs]
        node_stats[node.id] = time_callable(
            lambda n=node, i=ins: graphmod.execute_node(n, i, store), cfg)
        node_kinds[node.id] = node.kind
    overhead = total.median_ms - sum(s.median_ms for s in node_stats.values())
    return GraphBenchResult(total=total, nodes=node_stats, node_kinds=node_kinds,
                            overhead_ms=overhead,
                            meta=_meta(cfg, input_shape=tuple(shape)))
