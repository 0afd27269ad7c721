"""Mask overlap, detection AP, log-average miss rate and loop timing.

All metric arithmetic is float64.
"""
from __future__ import annotations

import csv
import gc
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .detector.anchors import iou_matrix

log = logging.getLogger(__name__)

FPPI_GRID = np.logspace(-2.0, 0.0, 9)
# 55 px at 512 rows, scaled to the image height in use
REASONABLE_HEIGHT_FRACTION = 55.0 / 512.0


def binarize_logits(logits: np.ndarray) -> np.ndarray:
    """sigmoid(x) >= 0.5 is x >= 0."""
    return np.asarray(logits) >= 0


def dice_score(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _match_image(det_boxes: np.ndarray, gt_boxes: np.ndarray, gt_ignore: np.ndarray, iou_threshold: float):
    """Greedy matching in the given (confidence-descending) order.

    Returns per-detection status: 1 true positive, 0 false positive, -1 matched an ignored gt.
    A detection prefers unmatched non-ignored gts; it falls back to ignored ones.
    """
    status = np.zeros(len(det_boxes), dtype=np.int64)
    if len(gt_boxes) == 0 or len(det_boxes) == 0:
        return status
    iou = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        best, best_iou = -1, iou_threshold
        for g in np.flatnonzero(~gt_ignore):
            if not taken[g] and iou[d, g] >= best_iou and (best < 0 or iou[d, g] > iou[d, best]):
                best, best_iou = g, iou[d, g]
        if best >= 0:
            taken[best] = True
            status[d] = 1
            continue
        if np.any(gt_ignore & (iou[d] >= iou_threshold)):
            status[d] = -1
    return status


def _gather(detections: Sequence[Sequence], gts: Sequence, label: Optional[int], iou_threshold: float,
            min_height: float = 0.0):
    """Scores and TP/FP flags over all images for one class, plus the count of scored gts."""
    scores, flags, order_keys = [], [], []
    n_gt = 0
    for img, (dets, gt) in enumerate(zip(detections, gts)):
        boxes = np.asarray(gt.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(gt.labels)
        sel = np.ones(len(boxes), dtype=bool) if label is None else labels == label
        boxes = boxes[sel]
        ignore = (boxes[:, 3] - boxes[:, 1]) < min_height
        n_gt += int((~ignore).sum())
        own = [d for d in dets if label is None or d.label == label]
        own = sorted(enumerate(own), key=lambda t: (-t[1].confidence, t[0]))
        det_boxes = np.array([d.box for _, d in own], dtype=np.float64).reshape(-1, 4)
        status = _match_image(det_boxes, boxes, ignore, iou_threshold)
        for (k, d), s in zip(own, status):
            if s < 0:
                continue
            scores.append(d.confidence)
            flags.append(s)
            order_keys.append((img, k))
    scores = np.array(scores, dtype=np.float64)
    flags = np.array(flags, dtype=np.int64)
    # confidence descending; ties by image then rank within image
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], order_keys[i]))
    return scores[idx], flags[idx], n_gt


def average_precision(detections: Sequence[Sequence], gts: Sequence, label: Optional[int] = None,
                      iou_threshold: float = 0.5) -> float:
    """All-points interpolated area under the precision/recall curve.

    ``detections[i]`` and ``gts[i]`` belong to image i. Returns NaN when the
    class has no ground truth.
    """
    _, flags, n_gt = _gather(detections, gts, label, iou_threshold)
    if n_gt == 0:
        return float("nan")
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags == 1)
    fp = np.cumsum(flags == 0)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def mean_average_precision(detections, gts, num_classes: int, iou_threshold: float = 0.5):
    """Returns (mAP, per-class AP dict). Classes without ground truth are excluded."""
    per_class = {}
    for k in range(num_classes):
        ap = average_precision(detections, gts, k, iou_threshold)
        if np.isnan(ap):
            log.info("class %d has no ground truth; excluded from mAP", k)
            continue
        per_class[k] = ap
    m = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return m, per_class


def miss_rate_curve(detections, gts, label: Optional[int] = None, iou_threshold: float = 0.5,
                    min_height: float = 0.0):
    """(fppi, miss_rate) pairs, starting from the no-detection point (0, 1)."""
    _, flags, n_gt = _gather(detections, gts, label, iou_threshold, min_height)
    if n_gt == 0:
        return None
    n_img = max(len(gts), 1)
    tp = np.concatenate([[0], np.cumsum(flags == 1)])
    fp = np.concatenate([[0], np.cumsum(flags == 0)])
    return fp / n_img, 1.0 - tp / n_gt


def log_average_miss_rate(detections, gts, fppi_grid: Sequence[float] = FPPI_GRID, label: Optional[int] = None,
                          iou_threshold: float = 0.5, min_height: float = 0.0) -> Optional[float]:
    """Geometric mean of the miss rate sampled at ``fppi_grid``.

    At each reference FPPI the curve's miss rate at the last operating point
    not exceeding it is used. Returns None when no gt survives the height filter.
    """
    curve = miss_rate_curve(detections, gts, label, iou_threshold, min_height)
    if curve is None:
        return None
    fppi, mr = curve
    samples = []
    for ref in fppi_grid:
        j = np.flatnonzero(fppi <= ref)
        samples.append(mr[j[-1]])
    samples = np.array(samples, dtype=np.float64)
    if np.any(samples <= 0):
        return 0.0
    return float(np.exp(np.mean(np.log(samples))))


def recall_at_fppi(detections, gts, fppi: float, label: Optional[int] = None, iou_threshold: float = 0.5,
                   min_height: float = 0.0) -> Optional[float]:
    curve = miss_rate_curve(detections, gts, label, iou_threshold, min_height)
    if curve is None:
        return None
    f, mr = curve
    return float(1.0 - mr[np.flatnonzero(f <= fppi)[-1]])


def reasonable_min_height(image_height: int) -> float:
    return REASONABLE_HEIGHT_FRACTION * image_height


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingStats:
    median: float
    iqr: float
    mean: float
    samples: list = field(repr=False, default_factory=list)


def timing_profile(model, sample, loop_counts: Sequence[int], warmup: int = 5, iterations: int = 50,
                   clock=time.perf_counter) -> dict[int, TimingStats]:
    """Wall time of one inference per loop count, measured round-robin so drift hits all counts alike."""
    if warmup < 5 or iterations < 50:
        raise ValueError("need warmup >= 5 and iterations >= 50")
    vis, thr = sample.visible, sample.thermal
    for _ in range(warmup):
        for k in loop_counts:
            model.infer(vis, thr, loops=k)
    times = {k: [] for k in loop_counts}
    # a collection pause inside one timed call would land on a single loop count
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(iterations):
            for k in loop_counts:
                t0 = clock()
                model.infer(vis, thr, loops=k)
                times[k].append(clock() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    out = {}
    for k, ts in times.items():
        arr = np.array(ts)
        q1, q3 = np.percentile(arr, [25, 75])
        out[k] = TimingStats(float(np.median(arr)), float(q3 - q1), float(arr.mean()), ts)
    return out


def marginal_costs(profile: dict[int, TimingStats]) -> list[float]:
    """Cost of each additional loop count over the previous one.

    With per-round samples this is the median of within-round differences, which cancels
    drift shared by neighbouring calls; otherwise the difference of medians.
    """
    ks = sorted(profile)
    out = []
    for a, b in zip(ks, ks[1:]):
        sa, sb = profile[a].samples, profile[b].samples
        if sa and len(sa) == len(sb):
            out.append(float(np.median(np.subtract(sb, sa))))
        else:
            out.append(profile[b].median - profile[a].median)
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    per_class_ap: dict
    mAP: float
    log_average_miss_rate: Optional[float]
    dice_per_loop: list
    config: dict
    seed: int
    recall_at_fppi: Optional[float] = None
    timing_per_loop: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in [("mAP", self.mAP), ("log_average_miss_rate", self.log_average_miss_rate)] + \
                [(f"dice_{i + 1}", d) for i, d in enumerate(self.dice_per_loop)]:
            if v is not None and not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_text(self) -> str:
        lines = [f"seed: {self.seed}",
                 f"mAP: {self.mAP:.6f}",
                 f"log_average_miss_rate: {'absent' if self.log_average_miss_rate is None else f'{self.log_average_miss_rate:.6f}'}"]
        if self.recall_at_fppi is not None:
            lines.append(f"recall_at_fppi_1: {self.recall_at_fppi:.6f}")
        for k, ap in sorted(self.per_class_ap.items()):
            lines.append(f"ap_class_{k}: {ap:.6f}")
        lines.append("dice_per_loop: " + " ".join(f"{d:.6f}" for d in self.dice_per_loop))
        for k, v in sorted(self.timing_per_loop.items()):
            lines.append(f"time_loops_{k}_ms: {1000 * v:.4f}")
        lines.append("config:")
        for k, v in sorted(self.config.items()):
            lines.append(f"  {k}: {v}")
        return "\n".join(lines) + "\n"

    def csv_row(self) -> dict:
        row = {"seed": self.seed, "mAP": self.mAP,
               "lamr": "" if self.log_average_miss_rate is None else self.log_average_miss_rate}
        for i, d in enumerate(self.dice_per_loop):
            row[f"dice_{i + 1}"] = d
        return row


def detections_csv(detections_per_image: dict) -> str:
    """image_id, class, x1, y1, x2, y2, confidence."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "class", "x1", "y1", "x2", "y2", "confidence"])
    for image_id, dets in detections_per_image.items():
        for d in dets:
            w.writerow([image_id, d.label, *(f"{v:.4f}" for v in d.box), f"{d.confidence:.6f}"])
    return buf.getvalue()


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 greymap; nonzero pixels white."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + m.tobytes())
