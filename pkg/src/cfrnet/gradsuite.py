"""The finite-difference suite over every registered op plus a tiny end-to-end model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cfr import CfrConfig, CfrParams, final_fusion, run_cycle
from .gradcheck import GradCheckReport, finite_diff_check
from .tensor import OPS, BatchNormStats, Tensor

F64 = np.float64


@dataclass
class Case:
    name: str
    op: str           # registered op class this case exercises
    fn: Callable
    inputs: list


def _t(a, grad=True) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def _away_from(rng, shape, points=(0.0,), margin=0.05):
    """Normal draws nudged at least ``margin`` away from each kink in ``points``."""
    x = rng.standard_normal(shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin) * 2
    return x


def op_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []

    for stride, pad, bias in ((1, 1, True), (2, 1, False), (1, 0, True), (2, 0, True)):
        x = _t(rng.standard_normal((2, 3, 7, 6)))
        w = _t(rng.standard_normal((4, 3, 3, 3)))
        ins = [x, w] + ([_t(rng.standard_normal(4))] if bias else [])
        cases.append(Case(f"conv2d(s{stride},p{pad}{',bias' if bias else ''})", "Conv2d",
                          lambda x, w, b=None, s=stride, p=pad: T.conv2d(x, w, b, stride=s, padding=p), ins))
    x = _t(rng.standard_normal((1, 2, 5, 5)))
    w = _t(rng.standard_normal((3, 2, 1, 1)))
    cases.append(Case("conv2d(1x1)", "Conv2d", lambda x, w: T.conv2d(x, w), [x, w]))

    x = _t(rng.standard_normal((3, 2, 4, 3)) * 2 + 1)
    g = _t(rng.standard_normal(2))
    b = _t(rng.standard_normal(2))
    cases.append(Case("batchnorm2d(train)", "BatchNorm2d",
                      lambda x, g, b: T.batchnorm2d(x, g, b, BatchNormStats(2, F64), training=True), [x, g, b]))
    stats = BatchNormStats(2, F64)
    stats.running_mean[:] = rng.standard_normal(2)
    stats.running_var[:] = rng.uniform(0.5, 2.0, 2)
    cases.append(Case("batchnorm2d(eval)", "BatchNorm2d",
                      lambda x, g, b: T.batchnorm2d(x, g, b, stats, training=False), [x, g, b]))

    cases.append(Case("relu", "ReLU", T.relu, [_t(_away_from(rng, (2, 3, 4, 4)))]))
    cases.append(Case("add", "Add", T.add, [_t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((2, 3, 4)))]))
    cases.append(Case("mul_scalar", "MulScalar", lambda x: T.mul_scalar(x, -0.7),
                      [_t(rng.standard_normal((3, 5)))]))
    a = rng.standard_normal((2, 3, 4))
    cases.append(Case("maximum", "Maximum", T.maximum,
                      [_t(a), _t(a + _away_from(rng, a.shape, margin=0.1))]))
    cases.append(Case("mean_of_list", "MeanOfList", lambda *xs: T.mean_of_list(xs),
                      [_t(rng.standard_normal((2, 3))) for _ in range(3)]))
    cases.append(Case("concat_channels", "ConcatChannels", T.concat_channels,
                      [_t(rng.standard_normal((2, 3, 2, 2))), _t(rng.standard_normal((2, 2, 2, 2)))]))
    cases.append(Case("concat(axis=1)", "Concat", lambda a, b: T.concat([a, b], axis=1),
                      [_t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((2, 5, 4)))]))
    cases.append(Case("reshape", "Reshape", lambda x: T.reshape(x, (4, 6)), [_t(rng.standard_normal((2, 3, 4)))]))
    cases.append(Case("permute", "Permute", lambda x: T.permute(x, (0, 2, 3, 1)),
                      [_t(rng.standard_normal((2, 3, 4, 5)))]))
    cases.append(Case("index(slice)", "Index", lambda x: x[:, 1:3], [_t(rng.standard_normal((4, 5)))]))
    rows = np.array([0, 2, 2, 5])
    cases.append(Case("index(rows)", "Index", lambda x: x[rows], [_t(rng.standard_normal((6, 3)))]))

    targets = (rng.random((2, 1, 3, 3)) > 0.5).astype(F64)
    cases.append(Case("sigmoid_bce", "SigmoidBCE", lambda x: T.sigmoid_bce(x, targets),
                      [_t(rng.standard_normal((2, 1, 3, 3)) * 3)]))
    labels = rng.integers(0, 4, 7)
    cases.append(Case("softmax_ce", "SoftmaxCE", lambda x: T.softmax_ce(x, labels),
                      [_t(rng.standard_normal((7, 4)) * 2)]))
    target = rng.standard_normal((6, 4))
    cases.append(Case("smooth_l1", "SmoothL1", lambda x: T.smooth_l1(x, target),
                      [_t(target + _away_from(rng, (6, 4), points=(-1.0, 1.0)) * 1.5)]))
    return cases


def cfr_case(seed: int = 0, channels: int = 2, loops: int = 2) -> Case:
    """Whole CFR cycle, final fusion and masks, w.r.t. inputs and all block parameters."""
    rng = np.random.default_rng(seed)
    params = CfrParams(channels, rng, dtype=F64)
    cfg = CfrConfig(channels, loops)
    f_t = _t(rng.standard_normal((2, channels, 4, 4)))
    f_v = _t(rng.standard_normal((2, channels, 4, 4)))

    def fn(f_t, f_v, *_):
        trace = run_cycle(f_t, f_v, cfg, params, training=True)
        parts = [final_fusion(trace)] + trace.mask_logits_t + trace.mask_logits_v
        return T.concat([T.reshape(p, (2, -1)) for p in parts], axis=1)

    return Case(f"cfr_cycle(I={loops})", "cfr", fn, [f_t, f_v] + params.parameters())


def tiny_model_case(seed: int = 0) -> Case:
    """N=1, C=2, 16x16 input, I=2 detector; joint loss against every parameter."""
    from .detector import Detector, DetectorConfig, build_targets, joint_loss
    from .sample import GroundTruth, SpectralSample, rasterize_boxes

    cfg = DetectorConfig(image_size=16, stem_widths=(2,), channels=2, downsample=2, det_strides=(2, 4, 8),
                         anchor_scales=((4.0,), (8.0,), (12.0,)), anchor_ratios=(0.5,), fusion="cfr", loops=2)
    model = Detector(cfg, seed=seed, dtype=F64)
    rng = np.random.default_rng(seed + 1)
    boxes = np.array([[3.0, 2.0, 9.0, 14.0]])
    gt = GroundTruth(boxes, np.array([0]), rasterize_boxes(boxes, 16, 16)[None, None], ("both",))
    sample = SpectralSample(rng.random((1, 3, 16, 16)).astype(np.float32),
                            rng.random((1, 1, 16, 16)).astype(np.float32), gt, {})
    targets = build_targets([gt], model.anchors, cfg.downsample)
    vis = Tensor(sample.visible, dtype=F64)
    thr = Tensor(sample.thermal, dtype=F64)

    def fn(*_):
        return joint_loss(model(vis, thr, training=True), targets, seg_weight=1.0).total

    return Case("tiny_model(N=1,C=2,16x16,I=2)", "model", fn, model.parameters())


@dataclass
class SuiteResult:
    reports: list
    seconds: float
    uncovered: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports) and not self.uncovered

    def failing(self) -> list[str]:
        return [r.name for r in self.reports if not r.passed]

    def to_text(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34} max_rel_err={r.max_rel_error:.3e}"
                 + (f"  {r.message}" if r.message else "") for r in self.reports]
        if self.uncovered:
            lines.append("FAIL  ops without a check: " + ", ".join(self.uncovered))
        lines.append(f"{'PASS' if self.passed else 'FAIL'}  suite ({len(self.reports)} checks, {self.seconds:.1f} s)")
        return "\n".join(lines) + "\n"


def run_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-6) -> SuiteResult:
    t0 = time.perf_counter()
    cases = op_cases(seed) + [cfr_case(seed), tiny_model_case(seed)]
    reports = []
    for case in cases:
        try:
            rep = finite_diff_check(case.fn, case.inputs, h=h, tol=tol, name=case.name, seed=seed)
        except Exception as exc:  # a crashing backward is a failed check, not a crashed suite
            rep = GradCheckReport(case.name, float("inf"), tol=tol, message=f"{type(exc).__name__}: {exc}")
        reports.append(rep)
    covered = {c.op for c in cases}
    uncovered = sorted(set(OPS) - covered)
    return SuiteResult(reports, time.perf_counter() - t0, uncovered)
