"""Cyclic fuse-and-refine fusion of thermal and visible feature maps.

One loop ``i`` computes

    fused_i   = BN(conv3x3(concat(thermal_{i-1}, visible_{i-1})))
    thermal_i = relu(thermal_{i-1} + fused_i)
    visible_i = relu(visible_{i-1} + fused_i)

with a single convolution/BN pair reused by every loop, and predicts one
segmentation logit map per spectrum from the refined features. The block
output is the plain average of all refined thermal and visible maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    BatchNormStats,
    Parameter,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    constant,
    conv2d,
    he_normal,
    maximum,
    mean_of_list,
    relu,
)

MAX_LOOPS = 8
BASELINE_STRATEGIES = ("average", "max", "concat_conv")


@dataclass
class CfrConfig:
    channels: int
    loops: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    bn_stats_shared_across_loops: bool = True

    def __post_init__(self):
        if self.channels <= 0:
            raise ContractError(f"channels must be positive, got {self.channels}")
        if not 0 <= self.loops <= MAX_LOOPS:
            raise ContractError(f"loops must lie in [0, {MAX_LOOPS}], got {self.loops}")


class CfrParams:
    """Shared fusion conv + BN and the two 1x1 segmentation heads.

    The trainable parameter set does not depend on the loop count. With
    ``shared_stats=False`` each loop keeps its own BN running statistics
    (buffers only; gamma/beta stay shared).
    """

    def __init__(self, channels: int, rng: np.random.Generator, shared_stats: bool = True,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5, dtype=np.float32):
        c = channels
        self.channels = c
        self.fuse_weight = he_normal("cfr.fuse_weight", (c, 2 * c, 3, 3), rng, dtype)
        self.bn_weight = constant("cfr.bn.weight", (c,), 1.0, dtype)
        self.bn_bias = constant("cfr.bn.bias", (c,), 0.0, dtype)
        self.seg_t_weight = he_normal("cfr.seg_t.weight", (1, c, 1, 1), rng, dtype)
        self.seg_t_bias = constant("cfr.seg_t.bias", (1,), 0.0, dtype)
        self.seg_v_weight = he_normal("cfr.seg_v.weight", (1, c, 1, 1), rng, dtype)
        self.seg_v_bias = constant("cfr.seg_v.bias", (1,), 0.0, dtype)
        self.shared_stats = shared_stats
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self._stats: dict[int, BatchNormStats] = {}
        self._dtype = dtype

    @classmethod
    def from_config(cls, config: CfrConfig, rng: np.random.Generator, dtype=np.float32) -> "CfrParams":
        return cls(config.channels, rng, config.bn_stats_shared_across_loops, config.bn_momentum,
                   config.bn_eps, dtype)

    def stats_for(self, loop: int) -> BatchNormStats:
        key = 0 if self.shared_stats else loop
        if key not in self._stats:
            self._stats[key] = BatchNormStats(self.channels, self._dtype)
        return self._stats[key]

    def parameters(self) -> list[Parameter]:
        return [self.fuse_weight, self.bn_weight, self.bn_bias,
                self.seg_t_weight, self.seg_t_bias, self.seg_v_weight, self.seg_v_bias]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        for key in sorted(self._stats):
            suffix = "" if self.shared_stats else f".{key}"
            out[f"cfr.bn.running_mean{suffix}"] = self._stats[key].running_mean
            out[f"cfr.bn.running_var{suffix}"] = self._stats[key].running_var
        return out

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ContractError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data = state[p.name].astype(p.dtype).copy()
        for name, arr in state.items():
            if not name.startswith("cfr.bn.running_"):
                continue
            kind, _, idx = name[len("cfr.bn.running_"):].partition(".")
            stats = self.stats_for(int(idx) if idx else 0)
            target = stats.running_mean if kind == "mean" else stats.running_var
            target[...] = arr


@dataclass
class CfrTrace:
    """Per-loop record; index 0 holds loop 1."""

    f_t: list = field(default_factory=list)
    f_v: list = field(default_factory=list)
    f_f: list = field(default_factory=list)
    mask_logits_t: list = field(default_factory=list)
    mask_logits_v: list = field(default_factory=list)

    def __len__(self):
        return len(self.f_t)

    def truncated(self, k: int) -> "CfrTrace":
        return CfrTrace(self.f_t[:k], self.f_v[:k], self.f_f[:k], self.mask_logits_t[:k], self.mask_logits_v[:k])


def _check_pair(f_t: Tensor, f_v: Tensor, channels: int):
    if f_t.shape != f_v.shape:
        raise ContractError(f"spectral features differ in shape: {f_t.shape} vs {f_v.shape}")
    if len(f_t.shape) != 4 or f_t.shape[1] != channels:
        raise ContractError(f"expected N x {channels} x H x W features, got {f_t.shape}")


def fuse_step(f_t_prev: Tensor, f_v_prev: Tensor, params: CfrParams, training: bool, loop: int = 1) -> Tensor:
    _check_pair(f_t_prev, f_v_prev, params.channels)
    x = concat_channels(f_t_prev, f_v_prev)
    x = conv2d(x, params.fuse_weight, None, stride=1, padding=1)
    return batchnorm2d(x, params.bn_weight, params.bn_bias, params.stats_for(loop), training,
                       params.bn_momentum, params.bn_eps)


def refine_step(f_prev: Tensor, f_fused: Tensor) -> Tensor:
    return relu(add(f_prev, f_fused))


def predict_masks(f_t: Tensor, f_v: Tensor, params: CfrParams) -> tuple[Tensor, Tensor]:
    _check_pair(f_t, f_v, params.channels)
    return (conv2d(f_t, params.seg_t_weight, params.seg_t_bias),
            conv2d(f_v, params.seg_v_weight, params.seg_v_bias))


def run_cycle(f_t0: Tensor, f_v0: Tensor, config: CfrConfig, params: CfrParams, training: bool,
              loops: int | None = None) -> CfrTrace:
    """Unrolled execution of ``loops`` (default ``config.loops``) fuse-and-refine iterations."""
    n_loops = config.loops if loops is None else loops
    if n_loops < 1:
        raise ContractError("run_cycle needs at least one loop; use baseline_fuse for loops=0")
    if n_loops > MAX_LOOPS:
        raise ContractError(f"at most {MAX_LOOPS} loops supported")
    trace = CfrTrace()
    f_t, f_v = f_t0, f_v0
    for i in range(1, n_loops + 1):
        f_f = fuse_step(f_t, f_v, params, training, loop=i)
        f_t = refine_step(f_t, f_f)
        f_v = refine_step(f_v, f_f)
        m_t, m_v = predict_masks(f_t, f_v, params)
        trace.f_t.append(f_t)
        trace.f_v.append(f_v)
        trace.f_f.append(f_f)
        trace.mask_logits_t.append(m_t)
        trace.mask_logits_v.append(m_v)
    return trace


def final_fusion(trace: CfrTrace) -> Tensor:
    if len(trace) == 0:
        raise ContractError("final_fusion needs a non-empty trace")
    return mean_of_list(list(trace.f_t) + list(trace.f_v))


class ConcatConvParams:
    """1x1 projection 2C -> C for the concat_conv baseline."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32, prefix: str = "fusion"):
        self.weight = he_normal(f"{prefix}.weight", (channels, 2 * channels, 1, 1), rng, dtype)
        self.bias = constant(f"{prefix}.bias", (channels,), 0.0, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def baseline_fuse(f_t: Tensor, f_v: Tensor, strategy: str, params: ConcatConvParams | None = None) -> Tensor:
    if f_t.shape != f_v.shape:
        raise ContractError(f"spectral features differ in shape: {f_t.shape} vs {f_v.shape}")
    if strategy == "average":
        return mean_of_list([f_t, f_v])
    if strategy == "max":
        return maximum(f_t, f_v)
    if strategy == "concat_conv":
        if params is None:
            raise ContractError("concat_conv fusion needs its 1x1 projection parameters")
        return conv2d(concat_channels(f_t, f_v), params.weight, params.bias)
    raise ConfigError(f"unknown baseline fusion strategy {strategy!r}; choose from {BASELINE_STRATEGIES}")
