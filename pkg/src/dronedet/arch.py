"""Detector graph: configuration, deterministic build, forward pass, decode.

The network is a four-stage backbone of partial-convolution C2f blocks with
stride-2 downsampling convs, an SPPF pyramid on the last stage, a single
top-down attention-gated FPN with dynamic 2x upsampling, and one two-conv
predictor per head stride. ``graph_spec`` enumerates every weighted layer
exactly once, in weight-draw order; the builder and the FLOP accountant
both walk that list, so the instantiated model and its accounting cannot
diverge.

Default widths: backbone stages (32, 64, 128, 256) at strides (4, 8, 16,
32); neck node widths (32, 128, 256) at the P2/P3/P4 levels. The P2 node
keeps its lateral width (the high-resolution head dominates compute), while
P3/P4 nodes carry double their lateral width; these resolved widths are an
explicit config field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .blocks import (
    C2fParams,
    FusionParams,
    HeadParams,
    PConvBottleneck,
    SeParams,
    ag_fusion,
    head_forward,
    pc_c2f_forward,
    sppf,
)
from .losses import Box
from .evalmap import Detection
from .tensor import (
    ConvWeights,
    DTYPE,
    ShapeError,
    activation,
    conv2d,
    init_weights,
    make_rng,
    sigmoid,
)

VALID_STRIDES = (4, 8, 16, 32)


class ConfigError(ValueError):
    """Configuration violates an invariant; message names the field."""


@dataclass(frozen=True)
class ArchConfig:
    """Declarative description of the network.

    ``head_strides`` defaults to (4, 8, 16) and gains stride 32 exactly when
    ``include_p5`` is set. ``neck_widths`` are the P2/P3/P4 node widths after
    fusion; ``neck_repeats`` is the bottleneck count of each node's
    refinement block.
    """

    input_size: int = 640
    stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    stage_repeats: tuple[int, ...] = (1, 2, 2, 1)
    pconv_ratio: int = 4
    se_ratio: int = 16
    sppf_k: int = 5
    include_p5: bool = False
    head_strides: tuple[int, ...] | None = None
    num_classes: int = 10
    seed: int = 0
    neck_widths: tuple[int, ...] = (32, 128, 256)
    neck_repeats: int = 2

    def __post_init__(self) -> None:
        if self.head_strides is None:
            strides = (4, 8, 16, 32) if self.include_p5 else (4, 8, 16)
            object.__setattr__(self, "head_strides", strides)
        for name in ("stage_widths", "stage_repeats", "head_strides", "neck_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self._validate()

    def _validate(self) -> None:
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.stage_widths) != 4:
            raise ConfigError(f"stage_widths needs 4 entries, got {len(self.stage_widths)}")
        if len(self.stage_repeats) != 4 or any(r < 1 for r in self.stage_repeats):
            raise ConfigError(f"stage_repeats needs 4 entries >= 1, got {self.stage_repeats}")
        if len(self.neck_widths) != 3:
            raise ConfigError(f"neck_widths needs 3 entries (P2, P3, P4), got {len(self.neck_widths)}")
        if self.pconv_ratio < 1:
            raise ConfigError(f"pconv_ratio must be >= 1, got {self.pconv_ratio}")
        if self.neck_repeats < 1:
            raise ConfigError(f"neck_repeats must be >= 1, got {self.neck_repeats}")
        for label, widths in (("stage_widths", self.stage_widths), ("neck_widths", self.neck_widths)):
            for w in widths:
                # The C2f split halves the width before the partial conv.
                if w % self.pconv_ratio or (w // 2) % self.pconv_ratio or w % 2:
                    raise ConfigError(
                        f"{label} entry {w} incompatible with pconv_ratio {self.pconv_ratio}: "
                        f"width and half-width must divide by the ratio")
        for w in self.stage_widths[:3] + self.neck_widths:
            if w % self.se_ratio:
                raise ConfigError(f"width {w} not divisible by se_ratio {self.se_ratio}")
        if self.sppf_k % 2 == 0 or self.sppf_k < 1:
            raise ConfigError(f"sppf_k must be odd, got {self.sppf_k}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        bad = [s for s in self.head_strides if s not in VALID_STRIDES]
        if bad:
            raise ConfigError(f"head_strides {bad} outside {VALID_STRIDES}")
        if len(set(self.head_strides)) != len(self.head_strides) or not self.head_strides:
            raise ConfigError(f"head_strides must be nonempty and unique, got {self.head_strides}")
        if (32 in self.head_strides) != self.include_p5:
            raise ConfigError("stride 32 must be present exactly when include_p5 is set")

    @property
    def num_outputs(self) -> int:
        return 4 + self.num_classes


CONFIG_KEYS = tuple(f.name for f in fields(ArchConfig))


def load_config(path: str | None = None, **overrides) -> ArchConfig:
    """Resolve a config from a JSON file (or defaults) plus keyword overrides.

    Unknown keys are rejected by name; list values become tuples.
    """
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    data.update(overrides)
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return ArchConfig(**data)


@dataclass(frozen=True)
class LayerDecl:
    """One weighted layer of the graph, with its resolution at input_size.

    kind is 'conv', 'se' or 'dysample'. For 'dysample' the conv fields
    describe the 1x1 offset generator (evaluated at the input resolution
    h_in x w_in) while h_out x w_out is the upsampled output resolution.
    """

    name: str
    kind: str
    section: str
    c_in: int
    c_out: int
    k: int = 1
    stride: int = 1
    h_in: int = 0
    w_in: int = 0
    h_out: int = 0
    w_out: int = 0
    squeeze: int = 0
    act: str | None = "silu"


def _c2f_layers(prefix: str, section: str, c_in: int, width: int, repeats: int,
                ratio: int, res: int) -> list[LayerDecl]:
    half = width // 2
    cp = half // ratio
    out = [LayerDecl(f"{prefix}.entry", "conv", section, c_in, width, 1, 1,
                     res, res, res, res)]
    for j in range(repeats):
        out.append(LayerDecl(f"{prefix}.m{j}.spatial", "conv", section, cp, cp, 3, 1,
                             res, res, res, res))
        out.append(LayerDecl(f"{prefix}.m{j}.mix", "conv", section, half, half, 1, 1,
                             res, res, res, res, act=None))
    out.append(LayerDecl(f"{prefix}.exit", "conv", section, (2 + repeats) * half, width,
                         1, 1, res, res, res, res))
    return out


def graph_spec(cfg: ArchConfig) -> list[LayerDecl]:
    """Every weighted layer in weight-draw order."""
    layers: list[LayerDecl] = []
    size = cfg.input_size
    w = cfg.stage_widths

    res = size // 2
    layers.append(LayerDecl("stem", "conv", "backbone", 3, w[0], 3, 2, size, size, res, res))
    c_prev = w[0]
    for i, (width, repeats) in enumerate(zip(cfg.stage_widths, cfg.stage_repeats), start=1):
        res //= 2
        layers.append(LayerDecl(f"b{i}.down", "conv", "backbone", c_prev, width, 3, 2,
                                res * 2, res * 2, res, res))
        layers.extend(_c2f_layers(f"b{i}.c2f", "backbone", width, width, repeats,
                                  cfg.pconv_ratio, res))
        c_prev = width
    hidden = w[3] // 2
    layers.append(LayerDecl("sppf.cv1", "conv", "backbone", w[3], hidden, 1, 1,
                            res, res, res, res))
    layers.append(LayerDecl("sppf.cv2", "conv", "backbone", hidden * 4, w[3], 1, 1,
                            res, res, res, res))

    # Top-down neck: deepest level first. Lateral taps come from backbone
    # stages 3, 2, 1; the deep input starts at the SPPF output.
    deep_c = w[3]
    deep_res = res
    for level, lateral_c, node_c in ((4, w[2], cfg.neck_widths[2]),
                                     (3, w[1], cfg.neck_widths[1]),
                                     (2, w[0], cfg.neck_widths[0])):
        node_res = deep_res * 2
        layers.append(LayerDecl(f"neck.p{level}.se", "se", "neck", lateral_c, lateral_c,
                                h_in=node_res, w_in=node_res, h_out=1, w_out=1,
                                squeeze=lateral_c // cfg.se_ratio))
        layers.append(LayerDecl(f"neck.p{level}.dysample", "dysample", "neck", deep_c, 8,
                                1, 1, deep_res, deep_res, node_res, node_res, act=None))
        layers.append(LayerDecl(f"neck.p{level}.mix", "conv", "neck",
                                deep_c + lateral_c, node_c, 1, 1,
                                node_res, node_res, node_res, node_res))
        layers.extend(_c2f_layers(f"neck.p{level}.c2f", "neck", node_c, node_c,
                                  cfg.neck_repeats, cfg.pconv_ratio, node_res))
        deep_c = node_c
        deep_res = node_res

    node_widths = {4: cfg.neck_widths[0], 8: cfg.neck_widths[1],
                   16: cfg.neck_widths[2], 32: w[3]}
    for stride in sorted(cfg.head_strides):
        c = node_widths[stride]
        hres = cfg.input_size // stride
        level = {4: 2, 8: 3, 16: 4, 32: 5}[stride]
        layers.append(LayerDecl(f"head.p{level}.conv", "conv", "head", c, c, 3, 1,
                                hres, hres, hres, hres))
        layers.append(LayerDecl(f"head.p{level}.pred", "conv", "head", c, cfg.num_outputs,
                                1, 1, hres, hres, hres, hres, act=None))
    return layers


@dataclass
class Model:
    """Instantiated graph: per-layer weights plus wired block structures."""

    config: ArchConfig
    weights: dict[str, object]
    stem: ConvWeights
    stages: list[tuple[ConvWeights, C2fParams]]
    sppf_cv1: ConvWeights
    sppf_cv2: ConvWeights
    fusions: dict[int, FusionParams] = field(default_factory=dict)
    neck_c2f: dict[int, C2fParams] = field(default_factory=dict)
    heads: dict[int, HeadParams] = field(default_factory=dict)


def _weight_arrays(model: Model):
    for name in sorted(model.weights):
        w = model.weights[name]
        if isinstance(w, ConvWeights):
            yield name, w.kernel
            yield name + ".bias", w.bias
        elif isinstance(w, SeParams):
            yield name + ".w1", w.w1
            yield name + ".b1", w.b1
            yield name + ".w2", w.w2
            yield name + ".b2", w.b2


def param_count(model: Model) -> int:
    """Brute-force count over the model's actual weight storage."""
    return sum(int(arr.size) for _, arr in _weight_arrays(model))


def param_checksum(model: Model) -> str:
    """SHA-256 over all weight bytes in name order."""
    digest = hashlib.sha256()
    for name, arr in _weight_arrays(model):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def _init_se(rng: np.random.Generator, c: int, squeeze: int) -> SeParams:
    b1 = 1.0 / float(np.sqrt(c))
    w1 = rng.uniform(-b1, b1, size=(squeeze, c)).astype(DTYPE)
    b2 = 1.0 / float(np.sqrt(squeeze))
    w2 = rng.uniform(-b2, b2, size=(c, squeeze)).astype(DTYPE)
    return SeParams(w1=w1, b1=np.zeros(squeeze, dtype=DTYPE),
                    w2=w2, b2=np.zeros(c, dtype=DTYPE))


def build_model(cfg: ArchConfig) -> Model:
    """Allocate every weight of the graph, deterministically from cfg.seed.

    Draw order is exactly the ``graph_spec`` order: kernel entries in C
    order per layer; biases are zeros and consume no draws.
    """
    rng = make_rng(cfg.seed)
    weights: dict[str, object] = {}
    for decl in graph_spec(cfg):
        if decl.kind in ("conv", "dysample"):
            weights[decl.name] = init_weights(rng, (decl.c_out, decl.c_in, decl.k, decl.k))
        elif decl.kind == "se":
            weights[decl.name] = _init_se(rng, decl.c_in, decl.squeeze)
        else:  # pragma: no cover - graph_spec only emits the three kinds
            raise ConfigError(f"unknown layer kind {decl.kind}")

    def c2f(prefix: str, repeats: int) -> C2fParams:
        return C2fParams(
            entry=weights[f"{prefix}.entry"],
            bottlenecks=tuple(
                PConvBottleneck(w3=weights[f"{prefix}.m{j}.spatial"],
                                w1=weights[f"{prefix}.m{j}.mix"])
                for j in range(repeats)),
            exit=weights[f"{prefix}.exit"],
            ratio=cfg.pconv_ratio,
        )

    model = Model(
        config=cfg,
        weights=weights,
        stem=weights["stem"],
        stages=[(weights[f"b{i}.down"], c2f(f"b{i}.c2f", cfg.stage_repeats[i - 1]))
                for i in range(1, 5)],
        sppf_cv1=weights["sppf.cv1"],
        sppf_cv2=weights["sppf.cv2"],
    )
    for level in (4, 3, 2):
        model.fusions[level] = FusionParams(
            se=weights[f"neck.p{level}.se"],
            offset=weights[f"neck.p{level}.dysample"],
            mix=weights[f"neck.p{level}.mix"],
        )
        model.neck_c2f[level] = c2f(f"neck.p{level}.c2f", cfg.neck_repeats)
    for stride in cfg.head_strides:
        level = {4: 2, 8: 3, 16: 4, 32: 5}[stride]
        model.heads[stride] = HeadParams(conv=weights[f"head.p{level}.conv"],
                                         pred=weights[f"head.p{level}.pred"])
    return model


def forward(model: Model, x: np.ndarray, return_taps: bool = False):
    """Run the graph on a (N, 3, S, S) image batch, S = config.input_size.

    Returns {stride: map} with maps of shape (N, 4+K, S/stride, S/stride);
    with ``return_taps`` also returns the named intermediate tensors.
    """
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"input must be (N, 3, H, W), got {x.shape}")
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ShapeError(
            f"input spatial size {x.shape[2]}x{x.shape[3]} != configured "
            f"{cfg.input_size} (no implicit resize)")
    x = np.asarray(x, dtype=DTYPE)

    taps: dict[str, np.ndarray] = {}
    t = activation(conv2d(x, model.stem, stride=2), "silu")
    for i, (down, c2f_params) in enumerate(model.stages, start=1):
        t = activation(conv2d(t, down, stride=2), "silu")
        t = pc_c2f_forward(t, c2f_params)
        taps[f"stage{i}"] = t
    deep = sppf(taps["stage4"], model.sppf_cv1, model.sppf_cv2, cfg.sppf_k)
    taps["sppf"] = deep

    lateral_of = {4: "stage3", 3: "stage2", 2: "stage1"}
    for level in (4, 3, 2):
        fused = ag_fusion(deep, taps[lateral_of[level]], model.fusions[level])
        deep = pc_c2f_forward(fused, model.neck_c2f[level])
        taps[f"p{level}_node"] = deep

    node_of = {4: "p2_node", 8: "p3_node", 16: "p4_node", 32: "sppf"}
    maps: dict[int, np.ndarray] = {}
    for stride in sorted(model.heads):
        maps[stride] = head_forward(taps[node_of[stride]], model.heads[stride])
        taps[f"map_s{stride}"] = maps[stride]
    if return_taps:
        return maps, taps
    return maps


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def decode_detections(maps: dict[int, np.ndarray], conf_thresh: float,
                      image_id) -> list[Detection]:
    """Decode raw maps into detections; no suppression is applied.

    Per cell (i, j) at stride s: score = sigmoid(max class logit), class =
    argmax logit, centre = ((j+0.5)*s + dx*s, (i+0.5)*s + dy*s) from the raw
    regression pair, extent = softplus(raw) * s.
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must lie in [0, 1], got {conf_thresh}")
    out: list[Detection] = []
    for stride in sorted(maps):
        m = maps[stride]
        if m.shape[0] != 1:
            raise ShapeError("decode_detections expects batch size 1")
        grid = m[0].astype(np.float64)
        cls_logits = grid[4:]
        class_ids = cls_logits.argmax(axis=0)
        scores = sigmoid(cls_logits.max(axis=0))
        ii, jj = np.nonzero(scores >= conf_thresh)
        for i, j in zip(ii.tolist(), jj.tolist()):
            dx, dy, rw, rh = grid[0:4, i, j]
            box = Box(
                cx=(j + 0.5) * stride + dx * stride,
                cy=(i + 0.5) * stride + dy * stride,
                w=float(_softplus(rw)) * stride,
                h=float(_softplus(rh)) * stride,
            )
            out.append(Detection(image_id=image_id, class_id=int(class_ids[i, j]),
                                 score=float(scores[i, j]), box=box))
    return out


def tap_manifest(model: Model, x: np.ndarray) -> list[dict]:
    """Shape/checksum rows for every named tap of a forward pass."""
    _, taps = forward(model, x, return_taps=True)
    rows = []
    for name, arr in taps.items():
        rows.append({
            "tap": name,
            "shape": "x".join(str(d) for d in arr.shape),
            "sha256": hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest(),
        })
    return rows


def with_p5(cfg: ArchConfig) -> ArchConfig:
    """The same config with the stride-32 head included."""
    return replace(cfg, include_p5=True, head_strides=tuple(sorted(set(cfg.head_strides) | {32})))
