"""Command-line surface: `analyze`, `bench`, `detect`, `forward`,
`init-weights`.

Exit codes: 0 success (including zero detections), 2 for missing files,
malformed configs or bad arguments, 1 for internal invariant breaches.
CSV reports get a sibling .png figure rendered next to them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as benchmod
from . import builders, costmodel, imageio, plots, postprocess, tensor, weights
from . import graph as graphmod
from .builders import ConfigError
from .graph import GraphError
from .kernels import thread_limit
from .tensor import Shape
from .weights import ContainerError


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
        if h < 1 or w < 1:
            raise ValueError
        return h, w
    except ValueError:
        raise ConfigError(f"bad size {text!r}, expected HxW like 480x640") from None


def _load_config(path: str | None) -> builders.ModelConfig:
    if path is None:
        return builders.parse_config(builders.DEFAULT_CONFIG_JSON)
    return builders.load_config(path)


def _figure_path(csv_path: str) -> str:
    stem, _ = os.path.splitext(csv_path)
    return stem + ".png"


def _convention(name: str) -> costmodel.FlopsConvention:
    return {"macs": costmodel.FlopsConvention.MACS,
            "2xmacs": costmodel.FlopsConvention.TWO_PER_MAC}[name]


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    g = builders.build_model(cfg)
    h, w = _parse_size(args.input_size)
    report = costmodel.analyze(g, Shape(1, cfg.input_channels, h, w))
    conv = _convention(args.convention)

    print(f"arch: {cfg.arch}  width: {cfg.backbone.width_multiplier}")
    print(f"input: 1x{cfg.input_channels}x{h}x{w}")
    print(f"weighted backbone layers: {len(builders.weighted_backbone_layer_ids(g))}")
    print(f"residual blocks: {builders.count_residual_blocks(g)}")
    taps = {k: v for k, v in costmodel.tap_strides(g).items() if k.startswith("C")}
    if taps:
        print("tap strides: " + " ".join(f"{k}:{v}" for k, v in sorted(taps.items())))
    print()
    print(costmodel.format_table(report, conv), end="")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            costmodel.write_csv(report, f, conv)
        plots.cost_figure(report, _figure_path(args.csv))
        print(f"wrote {args.csv} and {_figure_path(args.csv)}")
    return 0


def _parse_sweep(text: str) -> tuple[str, list[float]]:
    if "=" not in text:
        raise ConfigError(f"bad sweep {text!r}, expected axis=v1,v2,...")
    axis, _, values = text.partition("=")
    try:
        vals = [float(v) for v in values.split(",") if v]
    except ValueError:
        raise ConfigError(f"bad sweep values in {text!r}") from None
    if not vals:
        raise ConfigError(f"empty sweep values in {text!r}")
    return axis.strip(), vals


def cmd_bench(args) -> int:
    h, w = _parse_size(args.input_size)
    cfg = benchmod.BenchConfig(
        input_shape=Shape(1, args.channels, h, w),
        warmup_iters=args.warmup, measure_iters=args.iters,
        threads=args.threads, seed=args.seed)

    if args.target in ("layer", "block"):
        axis, values = _parse_sweep(args.sweep)
        variants = benchmod.LAYER_PAIR if args.target == "layer" else benchmod.BLOCK_PAIR
        result = benchmod.bench_sweep(axis, values, variants, cfg)
        for k, v in result.meta.items():
            print(f"# {k}={v}")
        for r in result.rows:
            print(f"{r.axis_value:g} {r.variant} {r.median_ms:.6f}ms macs={r.macs}")
        if args.csv:
            with open(args.csv, "w", newline="") as f:
                result.to_csv(f)
            plots.sweep_figure(result, _figure_path(args.csv))
            print(f"wrote {args.csv} and {_figure_path(args.csv)}")
        if args.json:
            with open(args.json, "w") as f:
                f.write(result.to_json())
        return 0

    model_cfg = _load_config(args.config)
    g = builders.build_model(model_cfg)
    store = weights.load_weights(args.weights) if args.weights else None
    result = benchmod.bench_graph(g, store, cfg)
    for k, v in result.meta.items():
        print(f"# {k}={v}")
    print(f"total: median {result.total.median_ms:.3f}ms  "
          f"mean {result.total.mean_ms:.3f}ms  p95 {result.total.p95_ms:.3f}ms")
    print(f"dispatch overhead vs node sum: {result.overhead_ms:.3f}ms")
    rows = costmodel.latency_breakdown(g, result.node_medians())
    print(costmodel.format_breakdown(rows))
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            result.to_csv(f)
        groups = {n.id: n.group for n in g.nodes}
        plots.graph_bench_figure(result, groups, _figure_path(args.csv))
        print(f"wrote {args.csv} and {_figure_path(args.csv)}")
    if args.json:
        with open(args.json, "w") as f:
            f.write(result.to_json())
    return 0


def cmd_detect(args) -> int:
    cfg = _load_config(args.config)
    g = builders.build_model(cfg)
    store = weights.load_weights(args.weights)
    image = imageio.load_image(args.image)
    scales = [float(s) for s in args.scales.split(",") if s] if args.scales else []
    with thread_limit(args.threads):
        dets = postprocess.detect(g, store, image, score_threshold=args.threshold,
                                  flip=args.flip, scales=scales)
    if args.json:
        print(json.dumps(postprocess.detections_to_json(dets), indent=2))
    else:
        text = postprocess.format_detections(dets)
        if text:
            print(text)
    return 0


def cmd_forward(args) -> int:
    cfg = _load_config(args.config)
    g = builders.build_model(cfg)
    store = weights.load_weights(args.weights)
    x = imageio.load_image(args.input)
    with thread_limit(args.threads):
        outputs = graphmod.forward(g, store, x)
    names = args.outputs.split(",") if args.outputs else sorted(outputs)
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        if name not in outputs:
            raise GraphError(f"graph has no output named {name!r}")
        path = os.path.join(args.out, f"{name}.blob")
        tensor.write_blob(outputs[name], path)
        print(f"{name} {'x'.join(map(str, outputs[name].shape))} {path}")
    return 0


def cmd_init_weights(args) -> int:
    cfg = _load_config(args.config)
    g = builders.build_model(cfg)
    store = weights.init_random_weights(g, seed=args.seed)
    weights.save_weights(store, args.out, checksums=args.checksums)
    print(f"wrote {len(store)} tensors to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eresfd",
                                description="CPU face-detection inference engine, "
                                            "cost model and latency benchmarks")
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="static FLOPs/params/receptive-field report")
    pa.add_argument("--config")
    pa.add_argument("--convention", choices=("macs", "2xmacs"), default="2xmacs")
    pa.add_argument("--csv")
    pa.add_argument("--input-size", default="480x640")
    pa.set_defaults(fn=cmd_analyze)

    pb = sub.add_parser("bench", help="latency microbenchmarks")
    pb.add_argument("target", choices=("layer", "block", "graph"))
    pb.add_argument("--sweep", default="channels=4,8,16,32,64,128",
                    help="axis=v1,v2,... with axis in "
                         "{channels, input_size, width_multiplier}")
    pb.add_argument("--config", help="model config for the graph target")
    pb.add_argument("--weights", help="weight container for the graph target")
    pb.add_argument("--threads", type=int, default=1)
    pb.add_argument("--warmup", type=int, default=20)
    pb.add_argument("--iters", type=int, default=100)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--channels", type=int, default=16,
                    help="input channels for input_size sweeps")
    pb.add_argument("--input-size", default="16x16")
    pb.add_argument("--csv")
    pb.add_argument("--json", help="write the same report as JSON to this path")
    pb.set_defaults(fn=cmd_bench)

    pd = sub.add_parser("detect", help="run face detection on an image")
    pd.add_argument("--config")
    pd.add_argument("--weights", required=True)
    pd.add_argument("--image", required=True)
    pd.add_argument("--threshold", type=float,
                    default=postprocess.DEFAULT_SCORE_THRESHOLD)
    pd.add_argument("--flip", action="store_true")
    pd.add_argument("--scales", help="comma-separated extra scale factors")
    pd.add_argument("--json", action="store_true")
    pd.add_argument("--threads", type=int, default=1)
    pd.set_defaults(fn=cmd_detect)

    pf = sub.add_parser("forward", help="dump named graph outputs as tensor blobs")
    pf.add_argument("--config")
    pf.add_argument("--weights", required=True)
    pf.add_argument("--input", required=True, help="PPM image or raw tensor blob")
    pf.add_argument("--out", required=True, help="output directory")
    pf.add_argument("--outputs", help="comma-separated output names (default: all)")
    pf.add_argument("--threads", type=int, default=1)
    pf.set_defaults(fn=cmd_forward)

    pw = sub.add_parser("init-weights", help="write a random-weight container")
    pw.add_argument("--config")
    pw.add_argument("--out", required=True)
    pw.add_argument("--seed", type=int, default=0)
    pw.add_argument("--checksums", action="store_true")
    pw.set_defaults(fn=cmd_init_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (GraphError, ContainerError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
