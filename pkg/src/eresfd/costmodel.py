"""Static cost analysis of a ModelGraph: MACs, parameters, output shapes
and receptive fields per node, aggregated per reporting group.

Counting conventions: a MAC is one multiply-accumulate; FLOPs are
reported either as MACS (1 per MAC) or TWO_PER_MAC.  Bias, normalization
and activation work is excluded from MAC counts, the usual convention
for conv-net cost tables.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Mapping

from .graph import GraphError, ModelGraph
from .kernels import ConvSpec
from .tensor import Shape


class FlopsConvention(enum.Enum):
    MACS = 1
    TWO_PER_MAC = 2

    def flops(self, macs: int) -> int:
        return macs * self.value


def conv_macs(spec: ConvSpec, input_shape: Shape) -> int:
    """kh*kw*(cin/groups)*cout*oh*ow multiply-accumulates for one conv."""
    if input_shape.c != spec.in_channels:
        raise ValueError(
            f"input has {input_shape.c} channels, spec expects {spec.in_channels}")
    oh, ow = spec.out_hw(input_shape.h, input_shape.w)
    kh, kw = spec.kernel
    return (kh * kw * (spec.in_channels // spec.groups) * spec.out_channels
            * oh * ow * input_shape.n)


def conv_params(spec: ConvSpec) -> int:
    kh, kw = spec.kernel
    n = kh * kw * (spec.in_channels // spec.groups) * spec.out_channels
    return n + (spec.out_channels if spec.has_bias else 0)


@dataclass
class NodeCost:
    id: str
    kind: str
    group: str
    macs: int
    params: int
    out_shape: Shape
    rf: float
    jump: float


@dataclass
class CostReport:
    input_shape: Shape
    nodes: list[NodeCost]

    def node(self, node_id: str) -> NodeCost:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def total_macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    def flops(self, convention: FlopsConvention = FlopsConvention.TWO_PER_MAC) -> int:
        return convention.flops(self.total_macs)

    def group_totals(self) -> dict[str, dict[str, int]]:
        groups: dict[str, dict[str, int]] = {}
        for n in self.nodes:
            g = groups.setdefault(n.group, {"macs": 0, "params": 0, "nodes": 0})
            g["macs"] += n.macs
            g["params"] += n.params
            g["nodes"] += 1
        return groups


def analyze(graph: ModelGraph, input_shape: Shape) -> CostReport:
    """Walk the graph once, inferring shapes, costs and receptive fields.

    The inferred output shapes use the same floor arithmetic as the
    kernels, so they match executor-observed shapes exactly.
    """
    if input_shape.c != graph.input_spec.c:
        raise ValueError(
            f"input has {input_shape.c} channels, graph expects {graph.input_spec.c}")
    shapes: dict[str, Shape] = {}
    rf: dict[str, tuple[float, float]] = {}
    nodes: list[NodeCost] = []

    for node in graph.nodes:
        macs = params = 0
        if node.kind == "input":
            shape = input_shape
            rf[node.id] = (1.0, 1.0)
        elif node.kind in ("conv", "depthwise-conv"):
            spec: ConvSpec = node.spec
            src = shapes[node.inputs[0]]
            try:
                oh, ow = spec.out_hw(src.h, src.w)
            except ValueError as e:
                raise GraphError(f"node {node.id}: {e}") from e
            shape = Shape(src.n, spec.out_channels, oh, ow)
            macs = conv_macs(spec, src)
            params = conv_params(spec)
            r, j = rf[node.inputs[0]]
            rf[node.id] = (r + (spec.kernel[0] - 1) * j, j * spec.stride[0])
        elif node.kind == "maxpool":
            p = node.spec
            src = shapes[node.inputs[0]]
            oh = (src.h + 2 * p["padding"][0] - p["kernel"][0]) // p["stride"][0] + 1
            ow = (src.w + 2 * p["padding"][1] - p["kernel"][1]) // p["stride"][1] + 1
            if oh < 1 or ow < 1:
                raise GraphError(f"node {node.id}: non-positive pool output {oh}x{ow}")
            shape = Shape(src.n, src.c, oh, ow)
            r, j = rf[node.inputs[0]]
            rf[node.id] = (r + (p["kernel"][0] - 1) * j, j * p["stride"][0])
        elif node.kind == "upsample":
            src = shapes[node.inputs[0]]
            if len(node.inputs) == 2:
                ref = shapes[node.inputs[1]]
                shape = Shape(src.n, src.c, ref.h, ref.w)
            else:
                shape = Shape(src.n, src.c, 2 * src.h, 2 * src.w)
            r, j = rf[node.inputs[0]]
            rf[node.id] = (r, j / 2)
        elif node.kind == "concat":
            srcs = [shapes[i] for i in node.inputs]
            shape = Shape(srcs[0].n, sum(s.c for s in srcs), srcs[0].h, srcs[0].w)
            rf[node.id] = (max(rf[i][0] for i in node.inputs),
                           max(rf[i][1] for i in node.inputs))
        elif node.kind in ("add", "weighted-fusion"):
            srcs = [shapes[i] for i in node.inputs]
            if len({s for s in srcs}) != 1:
                raise GraphError(f"node {node.id}: input shape mismatch {srcs}")
            shape = srcs[0]
            params = len(node.weight_names)
            rf[node.id] = (max(rf[i][0] for i in node.inputs),
                           max(rf[i][1] for i in node.inputs))
        elif node.kind == "maxout":
            src = shapes[node.inputs[0]]
            shape = Shape(src.n, src.c - node.spec["background"] + 1, src.h, src.w)
            rf[node.id] = rf[node.inputs[0]]
        else:  # relu, softmax
            shape = shapes[node.inputs[0]]
            rf[node.id] = rf[node.inputs[0]]
        shapes[node.id] = shape
        r, j = rf[node.id]
        nodes.append(NodeCost(id=node.id, kind=node.kind, group=node.group,
                              macs=macs, params=params, out_shape=shape, rf=r, jump=j))
    return CostReport(input_shape=input_shape, nodes=nodes)


def block_flops(block_graph: ModelGraph, input_shape: Shape,
                convention: FlopsConvention = FlopsConvention.TWO_PER_MAC) -> int:
    """Total FLOPs of a built block graph under the chosen convention."""
    return convention.flops(analyze(block_graph, input_shape).total_macs)


def param_count(graph: ModelGraph) -> int:
    """Learnable parameters: kernels, biases and fusion weights.  Engine
    graphs carry normalization pre-folded, so nothing is added for it."""
    some_hw = 256  # params are shape-independent; any valid spatial size works
    return analyze(graph, Shape(1, graph.input_spec.c, some_hw, some_hw)).total_params


def receptive_field(graph: ModelGraph, node_id: str,
                    input_shape: Shape | None = None) -> tuple[float, float]:
    """(rf, jump) of a node relative to input pixels.

    rf' = rf + (k - 1) * jump and jump' = jump * s along conv/pool nodes;
    multi-input nodes take the max over their inputs; 2x upsampling halves
    the jump.  Integer for pure backbone paths.
    """
    shape = input_shape or Shape(1, graph.input_spec.c, 512, 512)
    report = analyze(graph, shape)
    node_id = graph.outputs.get(node_id, node_id)  # output names resolve too
    reachable = {"input"}
    for node in graph.nodes:
        if any(i in reachable for i in node.inputs):
            reachable.add(node.id)
    if node_id not in {n.id for n in graph.nodes}:
        raise GraphError(f"no node with id {node_id!r}")
    if node_id not in reachable:
        raise GraphError(f"node {node_id!r} is not reachable from the input")
    n = report.node(node_id)
    return n.rf, n.jump


def tap_strides(graph: ModelGraph, names: Mapping[str, str] | None = None) -> dict[str, int]:
    """Output stride (the rf jump) of each named graph output."""
    outputs = names or graph.outputs
    report = analyze(graph, Shape(1, graph.input_spec.c, 512, 512))
    strides = {}
    for name, nid in outputs.items():
        j = report.node(nid).jump
        strides[name] = int(j) if float(j).is_integer() else j
    return strides


# ---------------------------------------------------------------------------
# latency attribution

@dataclass
class GroupLatency:
    group: str
    ms: float
    share_pct: float


def latency_breakdown(graph: ModelGraph, node_ms: Mapping[str, float]
                      ) -> list[GroupLatency]:
    """Aggregate per-node timings into per-group shares summing to 100%.

    Timings must cover every weighted node; unweighted nodes default to 0
    when absent.
    """
    weighted = [n.id for n in graph.nodes if n.kind in ("conv", "depthwise-conv")]
    missing = [nid for nid in weighted if nid not in node_ms]
    if missing:
        raise ValueError(f"missing latency stats for weighted nodes: {missing[:5]}")
    totals: dict[str, float] = {}
    for node in graph.nodes:
        if node.kind == "input":
            continue
        totals[node.group] = totals.get(node.group, 0.0) + float(node_ms.get(node.id, 0.0))
    grand = sum(totals.values())
    return [GroupLatency(group=g, ms=ms, share_pct=(100.0 * ms / grand if grand else 0.0))
            for g, ms in totals.items()]


def format_breakdown(rows: list[GroupLatency]) -> str:
    lines = [f"{r.group:<8} {r.ms:.1f}ms ({r.share_pct:.1f}%)" for r in rows]
    lines.append(f"{'total':<8} {sum(r.ms for r in rows):.1f}ms (100.0%)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# report serialization

CSV_COLUMNS = ("node_id", "kind", "macs", "flops", "params", "h", "w", "rf", "group")


def report_rows(report: CostReport,
                convention: FlopsConvention = FlopsConvention.TWO_PER_MAC) -> list[dict]:
    rows = []
    for n in report.nodes:
        rf = int(n.rf) if float(n.rf).is_integer() else round(n.rf, 3)
        rows.append({"node_id": n.id, "kind": n.kind, "macs": n.macs,
                     "flops": convention.flops(n.macs), "params": n.params,
                     "h": n.out_shape.h, "w": n.out_shape.w, "rf": rf,
                     "group": n.group})
    return rows


def write_csv(report: CostReport, f,
              convention: FlopsConvention = FlopsConvention.TWO_PER_MAC) -> None:
    writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    for row in report_rows(report, convention):
        writer.writerow(row)


def format_table(report: CostReport,
                 convention: FlopsConvention = FlopsConvention.TWO_PER_MAC) -> str:
    """Per-group summary table with totals, for stdout."""
    out = io.StringIO()
    groups = report.group_totals()
    out.write(f"{'group':<8} {'macs':>14} {'flops':>14} {'params':>10}\n")
    for g, t in groups.items():
        out.write(f"{g:<8} {t['macs']:>14,} {convention.flops(t['macs']):>14,} "
                  f"{t['params']:>10,}\n")
    out.write(f"{'total':<8} {report.total_macs:>14,} "
              f"{report.flops(convention):>14,} {report.total_params:>10,}\n")
    out.write(f"convention: {convention.name} "
              "(bias, normalization and activations excluded)\n")
    return out.getvalue()
