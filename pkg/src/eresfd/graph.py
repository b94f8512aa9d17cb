"""Layer graph representation and the forward executor.

A ModelGraph is an ordered, acyclic list of LayerNodes; node inputs may
only reference earlier nodes, so plain list order is a valid execution
order.  Node ids double as weight-name prefixes (`stage2.block0.conv1`
owns `stage2.block0.conv1.weight` / `.bias`) and their leading segment
names the reporting group (stem, stage1..6, neck, ccpm, head).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import kernels, tensor
from .kernels import ConvSpec, ConvWeights
from .tensor import Shape

NODE_KINDS = (
    "input",
    "conv",
    "depthwise-conv",
    "relu",
    "maxpool",
    "upsample",
    "add",
    "weighted-fusion",
    "concat",
    "softmax",
    "maxout",
)


class GraphError(ValueError):
    """Raised for malformed graphs and execution failures; names the node."""


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    spec: object = None  # ConvSpec for conv kinds, a param dict otherwise
    weight_names: list[str] = field(default_factory=list)

    @property
    def group(self) -> str:
        return self.id.split(".", 1)[0]


@dataclass
class ModelGraph:
    nodes: list[LayerNode]
    outputs: dict[str, str]
    input_spec: Shape  # h == w == 0 means the spatial dims are free

    def __post_init__(self):
        seen: set[str] = set()
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise GraphError(f"node {node.id}: unknown kind {node.kind!r}")
            if node.id in seen:
                raise GraphError(f"duplicate node id {node.id}")
            for ref in node.inputs:
                if ref not in seen:
                    raise GraphError(f"node {node.id}: input {ref!r} not defined earlier")
            seen.add(node.id)
        for name, nid in self.outputs.items():
            if nid not in seen:
                raise GraphError(f"output {name!r} references unknown node {nid!r}")

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"no node with id {node_id!r}")

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every weight name the graph resolves at execution time."""
        shapes: dict[str, tuple[int, ...]] = {}
        for n in self.nodes:
            if n.kind in ("conv", "depthwise-conv"):
                spec: ConvSpec = n.spec
                shapes[n.weight_names[0]] = spec.weight_shape()
                if spec.has_bias:
                    shapes[n.weight_names[1]] = (spec.out_channels,)
            elif n.kind == "weighted-fusion":
                for wname in n.weight_names:
                    shapes[wname] = (1,)
        return shapes


class GraphBuilder:
    """Appends nodes in topological order and hands out their ids."""

    def __init__(self, input_channels: int, batch: int = 1):
        self.nodes: list[LayerNode] = [LayerNode(id="input", kind="input")]
        self._ids = {"input"}
        self.input_spec = Shape(batch, input_channels, 0, 0)

    def add(self, node_id: str, kind: str, inputs: list[str], spec=None,
            weight_names: list[str] | None = None) -> str:
        if node_id in self._ids:
            raise GraphError(f"duplicate node id {node_id}")
        for ref in inputs:
            if ref not in self._ids:
                raise GraphError(f"node {node_id}: input {ref!r} not defined earlier")
        self.nodes.append(
            LayerNode(id=node_id, kind=kind, inputs=list(inputs), spec=spec,
                      weight_names=list(weight_names or [])))
        self._ids.add(node_id)
        return node_id

    def conv(self, node_id: str, x: str, spec: ConvSpec) -> str:
        kind = "depthwise-conv" if spec.is_depthwise and spec.groups > 1 else "conv"
        names = [f"{node_id}.weight"] + ([f"{node_id}.bias"] if spec.has_bias else [])
        return self.add(node_id, kind, [x], spec=spec, weight_names=names)

    def relu(self, node_id: str, x: str) -> str:
        return self.add(node_id, "relu", [x])

    def maxpool(self, node_id: str, x: str, kernel, stride, padding=(0, 0)) -> str:
        return self.add(node_id, "maxpool", [x],
                        spec={"kernel": tuple(kernel), "stride": tuple(stride),
                              "padding": tuple(padding)})

    def upsample(self, node_id: str, x: str, ref: str | None = None) -> str:
        # With a ref input the 2x output is cropped to the ref's spatial size
        # (pyramid alignment for odd feature-map sizes).
        inputs = [x] if ref is None else [x, ref]
        return self.add(node_id, "upsample", inputs)

    def add_op(self, node_id: str, a: str, b: str) -> str:
        return self.add(node_id, "add", [a, b])

    def fusion(self, node_id: str, xs: list[str], weight_names: list[str],
               epsilon: float) -> str:
        if len(weight_names) != len(xs):
            raise GraphError(f"node {node_id}: need one fusion weight per input")
        return self.add(node_id, "weighted-fusion", xs, spec={"epsilon": epsilon},
                        weight_names=weight_names)

    def concat(self, node_id: str, xs: list[str]) -> str:
        return self.add(node_id, "concat", xs)

    def softmax(self, node_id: str, x: str, group: int) -> str:
        return self.add(node_id, "softmax", [x], spec={"group": group})

    def maxout(self, node_id: str, x: str, background: int) -> str:
        return self.add(node_id, "maxout", [x], spec={"background": background})

    def graph(self, outputs: dict[str, str]) -> ModelGraph:
        return ModelGraph(nodes=list(self.nodes), outputs=dict(outputs),
                          input_spec=self.input_spec)


def _conv_weights(node: LayerNode, weights: Mapping[str, np.ndarray]) -> ConvWeights:
    spec: ConvSpec = node.spec
    try:
        kernel = weights[node.weight_names[0]]
        bias = weights[node.weight_names[1]] if spec.has_bias else None
    except KeyError as e:
        raise GraphError(f"node {node.id}: missing weight {e.args[0]!r}") from None
    return ConvWeights(kernel=kernel, bias=bias)


def execute_node(node: LayerNode, inputs: list[np.ndarray],
                 weights: Mapping[str, np.ndarray],
                 conv_method: str = kernels.DEFAULT_CONV_METHOD) -> np.ndarray:
    """Evaluate one node given its already-computed input tensors."""
    kind = node.kind
    if kind == "conv":
        return kernels.conv2d(inputs[0], node.spec, _conv_weights(node, weights),
                              method=conv_method)
    if kind == "depthwise-conv":
        return kernels.depthwise_conv2d(inputs[0], node.spec,
                                        _conv_weights(node, weights),
                                        method=conv_method)
    if kind == "relu":
        return tensor.relu(inputs[0])
    if kind == "maxpool":
        p = node.spec
        return kernels.maxpool2d(inputs[0], p["kernel"], p["stride"], p["padding"])
    if kind == "upsample":
        out = kernels.upsample_nearest2x(inputs[0])
        if len(inputs) == 2:
            rh, rw = inputs[1].shape[2], inputs[1].shape[3]
            if out.shape[2] < rh or out.shape[3] < rw:
                raise GraphError(
                    f"node {node.id}: upsampled size {out.shape[2:]} smaller than "
                    f"reference {(rh, rw)}")
            out = np.ascontiguousarray(out[:, :, :rh, :rw])
        return out
    if kind == "add":
        return tensor.elementwise_add(inputs[0], inputs[1])
    if kind == "weighted-fusion":
        try:
            ws = [float(np.asarray(weights[name]).reshape(-1)[0])
                  for name in node.weight_names]
        except KeyError as e:
            raise GraphError(f"node {node.id}: missing weight {e.args[0]!r}") from None
        return kernels.weighted_fusion(inputs, ws, epsilon=node.spec["epsilon"])
    if kind == "concat":
        return tensor.concat_channels(inputs)
    if kind == "softmax":
        return tensor.softmax_channels(inputs[0], node.spec["group"])
    if kind == "maxout":
        nb = node.spec["background"]
        x = inputs[0]
        if x.shape[1] <= nb:
            raise GraphError(f"node {node.id}: {x.shape[1]} channels too few for "
                             f"{nb} background channels")
        bg = x[:, :nb].max(axis=1, keepdims=True)
        return np.concatenate([bg, x[:, nb:]], axis=1)
    raise GraphError(f"node {node.id}: unknown kind {kind!r}")


def forward_trace(graph: ModelGraph, weights: Mapping[str, np.ndarray],
                  x: np.ndarray, conv_method: str = kernels.DEFAULT_CONV_METHOD,
                  on_node: Callable[[LayerNode, np.ndarray], None] | None = None,
                  ) -> dict[str, np.ndarray]:
    """Run the graph and return the output tensor of every node."""
    x = tensor.as_tensor(x)
    if x.shape[1] != graph.input_spec.c:
        raise GraphError(
            f"input has {x.shape[1]} channels, graph expects {graph.input_spec.c}")
    env: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind == "input":
            env[node.id] = x
            continue
        ins = [env[i] for i in node.inputs]
        try:
            out = execute_node(node, ins, weights, conv_method=conv_method)
        except GraphError:
            raise
        except (ValueError, KeyError) as e:
            raise GraphError(f"node {node.id}: {e}") from e
        env[node.id] = out
        if on_node is not None:
            on_node(node, out)
    return env


def forward(graph: ModelGraph, weights: Mapping[str, np.ndarray], x: np.ndarray,
            conv_method: str = kernels.DEFAULT_CONV_METHOD) -> dict[str, np.ndarray]:
    """Run the graph and return its named outputs."""
    env = forward_trace(graph, weights, x, conv_method=conv_method)
    return {name: env[nid] for name, nid in graph.outputs.items()}
