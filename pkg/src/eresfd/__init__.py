"""CPU inference engine and analysis toolkit for the EResFD face detector."""

from .bench import BenchConfig, LatencyStats, bench_graph, bench_node, bench_sweep
from .builders import (
    BackboneConfig,
    ModelConfig,
    NeckConfig,
    build_eresfd,
    build_model,
    load_config,
    parse_config,
)
from .costmodel import FlopsConvention, analyze, block_flops, conv_macs, param_count
from .graph import GraphBuilder, LayerNode, ModelGraph, forward
from .kernels import BatchNormParams, ConvSpec, ConvWeights
from .postprocess import DetBox, detect, generate_anchors
from .tensor import Shape
from .weights import init_random_weights, load_weights, save_weights

__all__ = [
    "BackboneConfig", "BatchNormParams", "BenchConfig", "ConvSpec", "ConvWeights",
    "DetBox", "FlopsConvention", "GraphBuilder", "LatencyStats", "LayerNode",
    "ModelConfig", "ModelGraph", "NeckConfig", "Shape", "analyze", "bench_graph",
    "bench_node", "bench_sweep", "block_flops", "build_eresfd", "build_model",
    "conv_macs", "detect", "forward", "generate_anchors", "init_random_weights",
    "load_config", "load_weights", "param_count", "parse_config", "save_weights",
]
