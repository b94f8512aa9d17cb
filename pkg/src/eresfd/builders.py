"""Builders for the EResFD detection graph and its comparison baselines.

The EResFD-1x layout: a 3-conv stem (5x5 stride-4 then two 3x3), six
stages of basic residual blocks laid out as (2, 3, 3, 3, 2, 1) with
strides (1, 2, 2, 2, 2, 2), one shared channel width of round(16 * m),
a separated top-down feature pyramid split at P5, a cascaded 3-conv
context module per level, and single 1x1 conv heads with max-out
background on D1.  That yields 31 weighted backbone layers (projection
shortcuts excluded, the usual depth-counting convention) across 14
residual blocks, and C1..C6 taps at strides 4 to 128.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .graph import GraphBuilder, GraphError, LayerNode, ModelGraph
from .kernels import ConvSpec, same_padding

BASE_CHANNELS = 16
DEFAULT_STAGE_BLOCKS = (2, 3, 3, 3, 2, 1)
DEFAULT_STAGE_STRIDES = (1, 2, 2, 2, 2, 2)
LEVEL_STRIDES = (4, 8, 16, 32, 64, 128)
ANCHOR_SIZES = (16, 32, 64, 128, 256, 512)
REG_CHANNELS = 4


@dataclass(frozen=True)
class BackboneConfig:
    width_multiplier: float = 1.0
    stage_blocks: tuple[int, ...] = DEFAULT_STAGE_BLOCKS
    stage_strides: tuple[int, ...] = DEFAULT_STAGE_STRIDES
    channel_preserving: bool = True
    stem: str = "eresnet"  # "eresnet" or "resnet" (comparison stem)

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if len(self.stage_blocks) != 6 or any(b < 1 for b in self.stage_blocks):
            raise ValueError("stage_blocks must be 6 positive integers")
        if len(self.stage_strides) != 6 or any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError("stage_strides must be 6 integers from {1, 2}")
        if self.stem not in ("eresnet", "resnet"):
            raise ValueError(f"unknown stem kind {self.stem!r}")

    @property
    def base_channels(self) -> int:
        return max(1, round(BASE_CHANNELS * self.width_multiplier))

    def stage_channels(self, stage: int) -> int:
        """Output width of 1-based stage; constant when channel-preserving."""
        if self.channel_preserving:
            return self.base_channels
        doublings = sum(1 for s in self.stage_strides[1:stage] if s == 2)
        return self.base_channels * (2 ** doublings)


@dataclass(frozen=True)
class NeckConfig:
    kind: str = "sepfpn"  # "sepfpn", "fpn", or "none"
    separation: int = 5  # lowest level of the upper group; applies to sepfpn
    fusion_epsilon: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("sepfpn", "fpn", "none"):
            raise ValueError(f"unknown neck kind {self.kind!r}")
        if self.kind == "sepfpn" and self.separation not in (3, 4, 5):
            raise ValueError("separation position must be P3, P4 or P5")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "eresfd"
    input_channels: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    ccpm: bool = True
    maxout_background: int = 3


# ---------------------------------------------------------------------------
# block and stem builders

def _conv3x3(cin: int, cout: int, stride: int = 1) -> ConvSpec:
    return ConvSpec(kernel=(3, 3), stride=(stride, stride),
                    padding=(same_padding(3),) * 2, in_channels=cin, out_channels=cout)


def _conv1x1(cin: int, cout: int, stride: int = 1) -> ConvSpec:
    return ConvSpec(kernel=(1, 1), stride=(stride, stride), padding=(0, 0),
                    in_channels=cin, out_channels=cout)


def add_residual_block(gb: GraphBuilder, x: str, prefix: str,
                       in_channels: int, channels: int, stride: int = 1) -> str:
    """Basic residual block: two 3x3 convs, skip add, ReLU after the add.

    The skip is a 1x1 stride-matched projection when the stride is not 1
    or the channel count changes, identity otherwise.
    """
    if stride not in (1, 2):
        raise ValueError(f"residual block stride must be 1 or 2, got {stride}")
    c0 = gb.conv(f"{prefix}.conv0", x, _conv3x3(in_channels, channels, stride))
    r0 = gb.relu(f"{prefix}.relu0", c0)
    c1 = gb.conv(f"{prefix}.conv1", r0, _conv3x3(channels, channels))
    skip = x
    if stride != 1 or in_channels != channels:
        skip = gb.conv(f"{prefix}.proj", x, _conv1x1(in_channels, channels, stride))
    out = gb.add_op(f"{prefix}.add", c1, skip)
    return gb.relu(f"{prefix}.relu1", out)


def add_inverted_residual_block(gb: GraphBuilder, x: str, prefix: str,
                                channels: int, expansion: int = 6,
                                stride: int = 1) -> str:
    """MobileNetV2-style inverted bottleneck: expand, 3x3 depthwise, project.

    The expand conv is omitted at expansion 1; the skip add exists only at
    stride 1 with equal channel counts (always equal here), with no ReLU
    after the linear projection or the add.
    """
    if expansion < 1:
        raise ValueError("expansion must be >= 1")
    hidden = channels * expansion
    h = x
    if expansion > 1:
        h = gb.conv(f"{prefix}.expand", h, _conv1x1(channels, hidden))
        h = gb.relu(f"{prefix}.relu0", h)
    h = gb.conv(f"{prefix}.dw", h,
                ConvSpec(kernel=(3, 3), stride=(stride, stride), padding=(1, 1),
                         in_channels=hidden, out_channels=hidden, groups=hidden))
    h = gb.relu(f"{prefix}.relu1", h)
    h = gb.conv(f"{prefix}.project", h, _conv1x1(hidden, channels))
    if stride == 1:
        h = gb.add_op(f"{prefix}.add", h, x)
    return h


def add_eresnet_stem(gb: GraphBuilder, x: str, in_channels: int,
                     base_channels: int, prefix: str = "stem") -> str:
    """5x5 stride-4 conv plus two 3x3 convs, ReLU after each; stride 4 out."""
    h = gb.conv(f"{prefix}.conv0", x,
                ConvSpec(kernel=(5, 5), stride=(4, 4), padding=(2, 2),
                         in_channels=in_channels, out_channels=base_channels))
    h = gb.relu(f"{prefix}.relu0", h)
    h = gb.conv(f"{prefix}.conv1", h, _conv3x3(base_channels, base_channels))
    h = gb.relu(f"{prefix}.relu1", h)
    h = gb.conv(f"{prefix}.conv2", h, _conv3x3(base_channels, base_channels))
    return gb.relu(f"{prefix}.relu2", h)


def add_resnet_stem(gb: GraphBuilder, x: str, in_channels: int,
                    base_channels: int, prefix: str = "stem") -> str:
    """Baseline stem: 7x7 stride-2 conv then 3x3 stride-2 max pool."""
    h = gb.conv(f"{prefix}.conv0", x,
                ConvSpec(kernel=(7, 7), stride=(2, 2), padding=(3, 3),
                         in_channels=in_channels, out_channels=base_channels))
    h = gb.relu(f"{prefix}.relu0", h)
    return gb.maxpool(f"{prefix}.pool", h, kernel=(3, 3), stride=(2, 2), padding=(1, 1))


def add_backbone(gb: GraphBuilder, x: str, cfg: BackboneConfig,
                 in_channels: int) -> list[str]:
    """Stem plus six residual stages; returns the C1..C6 tap node ids."""
    stem = add_eresnet_stem if cfg.stem == "eresnet" else add_resnet_stem
    h = stem(gb, x, in_channels, cfg.base_channels)
    taps = []
    ch_in = cfg.base_channels
    for stage, (blocks, stride) in enumerate(zip(cfg.stage_blocks, cfg.stage_strides), 1):
        ch_out = cfg.stage_channels(stage)
        for b in range(blocks):
            h = add_residual_block(gb, h, f"stage{stage}.block{b}", ch_in, ch_out,
                                   stride if b == 0 else 1)
            ch_in = ch_out
        taps.append(h)
    return taps


def add_sepfpn(gb: GraphBuilder, taps: list[str], cfg: NeckConfig,
               channels: list[int]) -> list[str]:
    """Two independent top-down paths split at the separation position.

    The upper group covers levels S..6, the lower group 1..S-1; within a
    group the top level passes through and every other level fuses its
    lateral tap with the 2x-upsampled level above.  No bottom-up edges.
    """
    if len(set(channels)) != 1:
        raise GraphError(f"pyramid taps must share one channel count, got {channels}")
    levels = len(taps)
    outs: list[str | None] = [None] * levels
    groups = [(cfg.separation, levels), (1, cfg.separation - 1)]

    def top_down(lo: int, hi: int):
        outs[hi - 1] = taps[hi - 1]
        for k in range(hi - 1, lo - 1, -1):
            up = gb.upsample(f"neck.up{k + 1}to{k}", outs[k], ref=taps[k - 1])
            outs[k - 1] = gb.fusion(
                f"neck.fuse{k}", [taps[k - 1], up],
                [f"neck.fuse{k}.w0", f"neck.fuse{k}.w1"], cfg.fusion_epsilon)

    for lo, hi in groups:
        if lo <= hi:
            top_down(lo, hi)
    return outs


def add_fpn(gb: GraphBuilder, taps: list[str], cfg: NeckConfig,
            channels: list[int]) -> list[str]:
    """Plain single-path top-down baseline using the same weighted fusion."""
    if len(set(channels)) != 1:
        raise GraphError(f"pyramid taps must share one channel count, got {channels}")
    outs: list[str] = [""] * len(taps)
    outs[-1] = taps[-1]
    for k in range(len(taps) - 1, 0, -1):
        up = gb.upsample(f"neck.up{k + 1}to{k}", outs[k], ref=taps[k - 1])
        outs[k - 1] = gb.fusion(f"neck.fuse{k}", [taps[k - 1], up],
                                [f"neck.fuse{k}.w0", f"neck.fuse{k}.w1"],
                                cfg.fusion_epsilon)
    return outs


def add_ccpm(gb: GraphBuilder, x: str, prefix: str, channels: int) -> str:
    """Cascade of three 3x3 convs with concatenated intermediate outputs.

    Branch widths (C/2, C/4, C/4) preserve the level's channel count; the
    branches sit at receptive fields 3, 5 and 7 relative to the input.
    """
    if channels % 4 != 0:
        raise GraphError(f"ccpm needs channels divisible by 4, got {channels}")
    half, quarter = channels // 2, channels // 4
    c0 = gb.conv(f"{prefix}.conv0", x, _conv3x3(channels, half))
    b0 = gb.relu(f"{prefix}.relu0", c0)
    c1 = gb.conv(f"{prefix}.conv1", b0, _conv3x3(half, quarter))
    b1 = gb.relu(f"{prefix}.relu1", c1)
    c2 = gb.conv(f"{prefix}.conv2", b1, _conv3x3(quarter, quarter))
    b2 = gb.relu(f"{prefix}.relu2", c2)
    return gb.concat(f"{prefix}.concat", [b0, b1, b2])


def add_heads(gb: GraphBuilder, feats: list[str], channels: list[int],
              maxout_background: int = 3) -> dict[str, str]:
    """Single 1x1 conv per head; D1 carries max-out background channels.

    Classification outputs are 2-channel (background, face) probability
    maps after the grouped softmax; regression outputs are raw 4-channel
    anchor deltas.
    """
    outputs: dict[str, str] = {}
    for k, (f, c) in enumerate(zip(feats, channels), 1):
        reg = gb.conv(f"head.d{k}.reg", f, _conv1x1(c, REG_CHANNELS))
        cls_ch = 2 + (maxout_background - 1 if k == 1 and maxout_background > 0 else 0)
        cls = gb.conv(f"head.d{k}.cls", f, _conv1x1(c, cls_ch))
        if k == 1 and maxout_background > 0:
            cls = gb.maxout(f"head.d{k}.maxout", cls, background=maxout_background)
        cls = gb.softmax(f"head.d{k}.softmax", cls, group=2)
        outputs[f"D{k}.reg"] = reg
        outputs[f"D{k}.cls"] = cls
    return outputs


def infer_channels(nodes: list[LayerNode], input_channels: int) -> dict[str, int]:
    """Static per-node channel counts (spatial dims stay free)."""
    ch: dict[str, int] = {}
    for node in nodes:
        if node.kind == "input":
            ch[node.id] = input_channels
        elif node.kind in ("conv", "depthwise-conv"):
            ch[node.id] = node.spec.out_channels
        elif node.kind == "concat":
            ch[node.id] = sum(ch[i] for i in node.inputs)
        elif node.kind == "maxout":
            ch[node.id] = ch[node.inputs[0]] - node.spec["background"] + 1
        else:
            ch[node.id] = ch[node.inputs[0]]
    return ch


# ---------------------------------------------------------------------------
# whole-model builders

def build_eresfd(cfg: ModelConfig | None = None) -> ModelGraph:
    """Full detector graph: backbone taps C1..C6, pyramid P1..P6, heads D1..D6."""
    cfg = cfg or ModelConfig()
    gb = GraphBuilder(input_channels=cfg.input_channels)
    taps = add_backbone(gb, "input", cfg.backbone, cfg.input_channels)
    ch = infer_channels(gb.nodes, cfg.input_channels)
    tap_ch = [ch[t] for t in taps]

    if cfg.neck.kind == "sepfpn":
        pyr = add_sepfpn(gb, taps, cfg.neck, tap_ch)
    elif cfg.neck.kind == "fpn":
        pyr = add_fpn(gb, taps, cfg.neck, tap_ch)
    else:
        pyr = list(taps)

    feats = pyr
    if cfg.ccpm:
        feats = [add_ccpm(gb, p, f"ccpm.p{k}", tap_ch[k - 1])
                 for k, p in enumerate(pyr, 1)]
    feat_ch = [infer_channels(gb.nodes, cfg.input_channels)[f] for f in feats]

    outputs = {f"C{i}": t for i, t in enumerate(taps, 1)}
    outputs.update({f"P{i}": p for i, p in enumerate(pyr, 1)})
    outputs.update(add_heads(gb, feats, feat_ch, cfg.maxout_background))
    return gb.graph(outputs)


def build_resnet18_backbone(width_multiplier: float = 1.0,
                            input_channels: int = 3) -> ModelGraph:
    """ResNet18-style comparison backbone: 7x7 stem + maxpool, stages
    (2, 2, 2, 2) with per-stage channel doubling; taps C2..C5."""
    base = max(1, round(64 * width_multiplier))
    gb = GraphBuilder(input_channels=input_channels)
    h = add_resnet_stem(gb, "input", input_channels, base)
    outputs = {}
    ch_in = base
    for stage, (blocks, stride) in enumerate(zip((2, 2, 2, 2), (1, 2, 2, 2)), 1):
        ch_out = base * (2 ** (stage - 1))
        for b in range(blocks):
            h = add_residual_block(gb, h, f"stage{stage}.block{b}", ch_in, ch_out,
                                   stride if b == 0 else 1)
            ch_in = ch_out
        outputs[f"C{stage + 1}"] = h
    return gb.graph(outputs)


# standalone single-block graphs, used by the microbenchmark and cost model

def residual_block_graph(channels: int, stride: int = 1,
                         in_channels: int | None = None) -> ModelGraph:
    gb = GraphBuilder(input_channels=in_channels or channels)
    out = add_residual_block(gb, "input", "stage1.block0",
                             in_channels or channels, channels, stride)
    return gb.graph({"out": out})


def inverted_residual_block_graph(channels: int, expansion: int = 6,
                                  stride: int = 1) -> ModelGraph:
    gb = GraphBuilder(input_channels=channels)
    out = add_inverted_residual_block(gb, "input", "stage1.block0", channels,
                                      expansion, stride)
    return gb.graph({"out": out})


def eresnet_stem_graph(in_channels: int = 3, base_channels: int = BASE_CHANNELS) -> ModelGraph:
    gb = GraphBuilder(input_channels=in_channels)
    return gb.graph({"out": add_eresnet_stem(gb, "input", in_channels, base_channels)})


def resnet_stem_graph(in_channels: int = 3, base_channels: int = BASE_CHANNELS) -> ModelGraph:
    gb = GraphBuilder(input_channels=in_channels)
    return gb.graph({"out": add_resnet_stem(gb, "input", in_channels, base_channels)})


# ---------------------------------------------------------------------------
# graph inspection

def weighted_backbone_layer_ids(graph: ModelGraph) -> list[str]:
    """Backbone convs under the depth-counting convention: stem and block
    convs count, 1x1 projection shortcuts do not."""
    return [n.id for n in graph.nodes
            if n.kind in ("conv", "depthwise-conv")
            and (n.group == "stem" or n.group.startswith("stage"))
            and not n.id.endswith(".proj")]


def count_residual_blocks(graph: ModelGraph) -> int:
    return sum(1 for n in graph.nodes
               if n.kind == "add" and n.group.startswith("stage"))


# ---------------------------------------------------------------------------
# JSON model configuration

DEFAULT_CONFIG_JSON = {
    "arch": "eresfd",
    "input_channels": 3,
    "width_multiplier": 1.0,
    "stage_blocks": list(DEFAULT_STAGE_BLOCKS),
    "stage_strides": list(DEFAULT_STAGE_STRIDES),
    "channel_preserving": True,
    "stem": "eresnet",
    "neck": {"kind": "sepfpn", "separation": "P5", "fusion_epsilon": 1e-4},
    "ccpm": True,
    "maxout_background": 3,
}


class ConfigError(ValueError):
    pass


def _take(d: dict, known: dict, what: str) -> dict:
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    merged = dict(known)
    merged.update(d)
    return merged


def _parse_separation(value) -> int:
    if isinstance(value, str) and value.upper().startswith("P"):
        value = value[1:]
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad separation position {value!r}") from None


def parse_config(d: dict) -> ModelConfig:
    """Parse and validate a model config dict; unknown keys are rejected."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    arch = d.get("arch", "eresfd")
    try:
        if arch == "resnet18":
            v = _take(d, {"arch": "resnet18", "input_channels": 3,
                          "width_multiplier": 1.0}, "config")
            return ModelConfig(
                arch="resnet18", input_channels=int(v["input_channels"]),
                backbone=BackboneConfig(width_multiplier=float(v["width_multiplier"]),
                                        stem="resnet"),
                neck=NeckConfig(kind="none"), ccpm=False)
        if arch != "eresfd":
            raise ConfigError(f"unknown arch {arch!r}")
        v = _take(d, DEFAULT_CONFIG_JSON, "config")
        neck = _take(v["neck"] if isinstance(v["neck"], dict) else {},
                     DEFAULT_CONFIG_JSON["neck"], "neck")
        return ModelConfig(
            arch="eresfd",
            input_channels=int(v["input_channels"]),
            backbone=BackboneConfig(
                width_multiplier=float(v["width_multiplier"]),
                stage_blocks=tuple(int(b) for b in v["stage_blocks"]),
                stage_strides=tuple(int(s) for s in v["stage_strides"]),
                channel_preserving=bool(v["channel_preserving"]),
                stem=str(v["stem"])),
            neck=NeckConfig(kind=str(neck["kind"]),
                            separation=_parse_separation(neck["separation"]),
                            fusion_epsilon=float(neck["fusion_epsilon"])),
            ccpm=bool(v["ccpm"]),
            maxout_background=int(v["maxout_background"]))
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
    return parse_config(d)


def build_model(cfg: ModelConfig) -> ModelGraph:
    if cfg.arch == "resnet18":
        return build_resnet18_backbone(cfg.backbone.width_multiplier,
                                       cfg.input_channels)
    return build_eresfd(cfg)
