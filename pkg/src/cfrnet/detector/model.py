"""Two-stream backbone, halfway fusion, and three-layer anchor head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from ..cfr import (
    BASELINE_STRATEGIES,
    CfrConfig,
    CfrParams,
    CfrTrace,
    ConcatConvParams,
    baseline_fuse,
    final_fusion,
    run_cycle,
)
from ..errors import ConfigError, ContractError
from ..tensor import (
    BatchNormStats,
    Parameter,
    Tensor,
    batchnorm2d,
    concat,
    constant,
    conv2d,
    he_normal,
    no_grad,
    permute,
    relu,
    reshape,
)
from .anchors import QUARTER_RES_SCALES, MULTICLASS_RATIOS, PEDESTRIAN_RATIO, anchors_array, generate_anchors

FUSIONS = ("cfr",) + BASELINE_STRATEGIES + ("visible_only", "thermal_only")


@dataclass
class DetectorConfig:
    image_size: int = 96
    stem_widths: tuple = (8, 16)
    channels: int = 16
    downsample: int = 4
    det_strides: tuple = (4, 8, 16)
    anchor_scales: tuple = QUARTER_RES_SCALES
    anchor_ratios: tuple = (PEDESTRIAN_RATIO,)
    num_classes: int = 1
    fusion: str = "cfr"
    loops: int = 3
    bn_momentum: float = 0.1
    bn_stats_shared_across_loops: bool = True

    def __post_init__(self):
        self.stem_widths = tuple(self.stem_widths)
        self.det_strides = tuple(self.det_strides)
        self.anchor_scales = tuple(tuple(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(self.anchor_ratios)
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        if self.fusion == "cfr" and self.loops < 1:
            raise ConfigError("cfr fusion needs loops >= 1; loops=0 means a baseline fusion")
        n_down = math.log2(self.downsample)
        if n_down != int(n_down) or int(n_down) != len(self.stem_widths):
            raise ConfigError("downsample must be 2**len(stem_widths)")
        if self.det_strides[0] != self.downsample or any(
                b != 2 * a for a, b in zip(self.det_strides, self.det_strides[1:])):
            raise ConfigError("detection strides must start at the fusion stride and double per layer")
        if len(self.anchor_scales) != len(self.det_strides):
            raise ConfigError("need one anchor scale list per detection layer")
        if self.image_size % self.det_strides[-1]:
            raise ConfigError("image size must be divisible by the coarsest detection stride")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales[0]) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown detector keys: {sorted(set(d) - known)}")
        return cls(**d)


def preset(name: str, **overrides) -> DetectorConfig:
    if name == "pedestrian":
        base = dict(anchor_ratios=(PEDESTRIAN_RATIO,), num_classes=1)
    elif name == "multiclass":
        base = dict(anchor_ratios=MULTICLASS_RATIOS, num_classes=3)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose 'pedestrian' or 'multiclass'")
    base.update(overrides)
    return DetectorConfig(**base)


class ConvBNReLU:
    def __init__(self, name: str, cin: int, cout: int, stride: int, rng, dtype, momentum: float):
        self.weight = he_normal(f"{name}.weight", (cout, cin, 3, 3), rng, dtype)
        self.gamma = constant(f"{name}.bn.weight", (cout,), 1.0, dtype)
        self.beta = constant(f"{name}.bn.bias", (cout,), 0.0, dtype)
        self.stats = BatchNormStats(cout, dtype)
        self.stride = stride
        self.momentum = momentum
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = conv2d(x, self.weight, None, stride=self.stride, padding=1)
        return relu(batchnorm2d(y, self.gamma, self.beta, self.stats, training, self.momentum))

    def parameters(self):
        return [self.weight, self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.bn.running_mean": self.stats.running_mean,
                f"{self.name}.bn.running_var": self.stats.running_var}


class Backbone:
    """One stride-2 conv per halving, then a stride-1 conv to the fusion width."""

    def __init__(self, prefix: str, in_channels: int, widths: tuple, channels: int, rng, dtype, momentum):
        chans = (in_channels,) + tuple(widths) + (channels,)
        n_down = len(widths)
        self.blocks = [ConvBNReLU(f"{prefix}.conv{i}", chans[i], chans[i + 1], 2 if i < n_down else 1, rng, dtype,
                                  momentum)
                       for i in range(len(chans) - 1)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for b in self.blocks:
            x = b(x, training)
        return x

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def buffers(self):
        out = {}
        for b in self.blocks:
            out.update(b.buffers())
        return out


class SegHeads:
    """1x1 mask heads on pre-fusion features, used when the fusion is not CFR."""

    def __init__(self, channels: int, rng, dtype, spectra=("t", "v")):
        self.heads = {s: (he_normal(f"fusion.seg_{s}.weight", (1, channels, 1, 1), rng, dtype),
                          constant(f"fusion.seg_{s}.bias", (1,), 0.0, dtype)) for s in spectra}

    def __call__(self, spectrum: str, x: Tensor) -> Tensor:
        w, b = self.heads[spectrum]
        return conv2d(x, w, b)

    def parameters(self):
        return [p for pair in self.heads.values() for p in pair]


@dataclass
class DetectorOutput:
    cls_logits: Tensor          # (N, A, K+1)
    box_deltas: Tensor          # (N, A, 4)
    mask_logits_t: list = field(default_factory=list)   # per loop, (N, 1, h, w)
    mask_logits_v: list = field(default_factory=list)
    trace: Optional[CfrTrace] = None
    fused: Optional[Tensor] = None


class Detector:
    def __init__(self, config: DetectorConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.uses_thermal = cfg.fusion != "visible_only"
        self.uses_visible = cfg.fusion != "thermal_only"
        self.backbone_v = Backbone("backbone_v", 3, cfg.stem_widths, c, rng, dtype, cfg.bn_momentum) if self.uses_visible else None
        self.backbone_t = Backbone("backbone_t", 1, cfg.stem_widths, c, rng, dtype, cfg.bn_momentum) if self.uses_thermal else None

        self.cfr_config = None
        self.cfr = None
        self.fusion_proj = None
        self.seg_heads = None
        if cfg.fusion == "cfr":
            self.cfr_config = CfrConfig(c, cfg.loops, cfg.bn_momentum, 1e-5, cfg.bn_stats_shared_across_loops)
            self.cfr = CfrParams.from_config(self.cfr_config, rng, dtype)
        elif cfg.fusion in ("visible_only", "thermal_only"):
            self.seg_heads = SegHeads(c, rng, dtype, spectra=("v",) if self.uses_visible else ("t",))
        else:
            self.seg_heads = SegHeads(c, rng, dtype)
            if cfg.fusion == "concat_conv":
                self.fusion_proj = ConcatConvParams(c, rng, dtype, prefix="fusion.proj")

        self.trunk = [ConvBNReLU("head.neck", c, c, 1, rng, dtype, cfg.bn_momentum)]
        for k in range(1, len(cfg.det_strides)):
            self.trunk.append(ConvBNReLU(f"head.down{k}", c, c, 2, rng, dtype, cfg.bn_momentum))
        out_ch = cfg.anchors_per_cell * (cfg.num_classes + 1 + 4)
        self.heads = []
        for k in range(len(cfg.det_strides)):
            w = he_normal(f"head.pred{k}.weight", (out_ch, c, 3, 3), rng, dtype)
            w.data *= 0.1
            w.init += "*0.1"
            self.heads.append((w, constant(f"head.pred{k}.bias", (out_ch,), 0.0, dtype)))

        self.anchor_boxes = generate_anchors(cfg.image_size, cfg.det_strides, cfg.anchor_scales, cfg.anchor_ratios)
        self.anchors = anchors_array(self.anchor_boxes)
        self._check_unique_names()

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        ps = []
        for part in (self.backbone_t, self.backbone_v, self.cfr, self.fusion_proj, self.seg_heads):
            if part is not None:
                ps.extend(part.parameters())
        for block in self.trunk:
            ps.extend(block.parameters())
        for w, b in self.heads:
            ps.extend([w, b])
        return ps

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _check_unique_names(self):
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ContractError("duplicate parameter names in detector")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        for part in (self.backbone_t, self.backbone_v):
            if part is not None:
                out.update(part.buffers())
        for block in self.trunk:
            out.update(block.buffers())
        if self.cfr is not None:
            out.update({k: v for k, v in self.cfr.state_dict().items() if "running" in k})
        return dict(sorted(out.items()))

    def load_state_dict(self, state: dict) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(self.dtype).copy()
        buffers = {}
        for part in (self.backbone_t, self.backbone_v):
            if part is not None:
                buffers.update(part.buffers())
        for block in self.trunk:
            buffers.update(block.buffers())
        for name, buf in buffers.items():
            buf[...] = state[name]
        if self.cfr is not None:
            self.cfr.load_state_dict({k: v for k, v in state.items() if k.startswith("cfr.")})

    # -- forward ------------------------------------------------------------

    def features(self, visible: Tensor, thermal: Tensor, training: bool):
        f_v = self.backbone_v(visible, training) if self.uses_visible else None
        f_t = self.backbone_t(thermal, training) if self.uses_thermal else None
        return f_t, f_v

    def fuse(self, f_t: Tensor, f_v: Tensor, training: bool, loops: Optional[int] = None):
        """Returns (fused, trace, mask_logits_t, mask_logits_v)."""
        cfg = self.config
        if cfg.fusion == "cfr":
            trace = run_cycle(f_t, f_v, self.cfr_config, self.cfr, training, loops=loops)
            return final_fusion(trace), trace, trace.mask_logits_t, trace.mask_logits_v
        if cfg.fusion == "visible_only":
            return f_v, None, [], [self.seg_heads("v", f_v)]
        if cfg.fusion == "thermal_only":
            return f_t, None, [self.seg_heads("t", f_t)], []
        fused = baseline_fuse(f_t, f_v, cfg.fusion, self.fusion_proj)
        return fused, None, [self.seg_heads("t", f_t)], [self.seg_heads("v", f_v)]

    def head(self, fused: Tensor, training: bool):
        k1 = self.config.num_classes + 1
        n = fused.shape[0]
        a = self.config.anchors_per_cell
        outs = []
        x = fused
        for block, (w, b) in zip(self.trunk, self.heads):
            x = block(x, training)
            y = conv2d(x, w, b, stride=1, padding=1)
            _, _, h, wd = y.shape
            outs.append(reshape(permute(y, (0, 2, 3, 1)), (n, h * wd * a, k1 + 4)))
        allout = concat(outs, axis=1) if len(outs) > 1 else outs[0]
        return allout[:, :, :k1], allout[:, :, k1:]

    def forward(self, visible, thermal, training: bool = False, loops: Optional[int] = None) -> DetectorOutput:
        visible = visible if isinstance(visible, Tensor) else Tensor(np.asarray(visible, dtype=self.dtype))
        thermal = thermal if isinstance(thermal, Tensor) else Tensor(np.asarray(thermal, dtype=self.dtype))
        f_t, f_v = self.features(visible, thermal, training)
        fused, trace, m_t, m_v = self.fuse(f_t, f_v, training, loops)
        cls_logits, box_deltas = self.head(fused, training)
        return DetectorOutput(cls_logits, box_deltas, list(m_t), list(m_v), trace, fused)

    __call__ = forward

    def infer(self, visible, thermal, loops: Optional[int] = None) -> DetectorOutput:
        with no_grad():
            return self.forward(visible, thermal, training=False, loops=loops)
