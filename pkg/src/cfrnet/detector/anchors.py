"""Anchor tiling, IoU, offset encoding, matching and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ContractError

PEDESTRIAN_RATIO = 0.41
MULTICLASS_RATIOS = (1.0, 2.0, 0.5)
# fine-to-coarse scale pairs for full-resolution inputs
FULL_RES_SCALES = ((32, 32 * math.sqrt(2)), (64, 64 * math.sqrt(2)), (128, 128 * math.sqrt(2)))
QUARTER_RES_SCALES = tuple(tuple(s / 4 for s in pair) for pair in FULL_RES_SCALES)


@dataclass(frozen=True)
class AnchorBox:
    cx: float
    cy: float
    w: float
    h: float
    layer: int
    scale: float
    ratio: float

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def anchor_shape(scale: float, ratio: float) -> tuple[float, float]:
    """w = s*sqrt(r), h = s/sqrt(r) so that w/h = r and w*h = s^2."""
    root = math.sqrt(ratio)
    return scale * root, scale / root


def generate_anchors(image_size, layer_strides: Sequence[int], scales: Sequence[Sequence[float]],
                     ratios: Sequence[float]) -> list[AnchorBox]:
    """Tile every cell of every detection layer; order is layer, row, col, scale, ratio."""
    height, width = (image_size, image_size) if np.isscalar(image_size) else image_size
    if len(scales) != len(layer_strides):
        raise ContractError("need one scale list per detection layer")
    anchors = []
    for layer, (stride, layer_scales) in enumerate(zip(layer_strides, scales)):
        if height % stride or width % stride:
            raise ContractError(f"stride {stride} does not divide image size {height}x{width}")
        if list(layer_scales) != sorted(layer_scales):
            raise ContractError(f"scales of layer {layer} must be sorted ascending")
        for i in range(height // stride):
            for j in range(width // stride):
                cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
                for s in layer_scales:
                    for r in ratios:
                        w, h = anchor_shape(s, r)
                        anchors.append(AnchorBox(cx, cy, w, h, layer, s, r))
    return anchors


def anchors_array(anchors: Sequence[AnchorBox]) -> np.ndarray:
    """(A, 4) cx, cy, w, h."""
    return np.array([(a.cx, a.cy, a.w, a.h) for a in anchors], dtype=np.float64).reshape(-1, 4)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2,
                     b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], axis=1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2,
                     b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, (M, N)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode(boxes_xyxy: np.ndarray, anchors_cxcywh: np.ndarray) -> np.ndarray:
    """Offsets (dcx/w, dcy/h, log(bw/w), log(bh/h)) of boxes relative to anchors."""
    b = xyxy_to_cxcywh(boxes_xyxy)
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    return np.stack([(b[:, 0] - a[:, 0]) / a[:, 2], (b[:, 1] - a[:, 1]) / a[:, 3],
                     np.log(b[:, 2] / a[:, 2]), np.log(b[:, 3] / a[:, 3])], axis=1)


def decode(offsets: np.ndarray, anchors_cxcywh: np.ndarray) -> np.ndarray:
    d = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    # cap the log-size offsets so exp() cannot overflow on untrained heads
    dw = np.minimum(d[:, 2], 8.0)
    dh = np.minimum(d[:, 3], 8.0)
    cxcywh = np.stack([a[:, 0] + d[:, 0] * a[:, 2], a[:, 1] + d[:, 1] * a[:, 3],
                       a[:, 2] * np.exp(dw), a[:, 3] * np.exp(dh)], axis=1)
    return cxcywh_to_xyxy(cxcywh)


@dataclass
class MatchResult:
    labels: np.ndarray    # (A,) 0 background, k+1 for class k, -1 ignored
    targets: np.ndarray   # (A, 4) encoded offsets, zero where not positive
    matched_gt: np.ndarray  # (A,) index of matched gt or -1


def match_anchors(anchors_cxcywh: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  iou_pos: float = 0.5, iou_neg: float = 0.4) -> MatchResult:
    if iou_pos < iou_neg:
        raise ContractError("positive IoU threshold must be >= negative threshold")
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    n = len(a)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return MatchResult(labels, targets, matched)

    iou = iou_matrix(cxcywh_to_xyxy(a), gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    pos = best_iou >= iou_pos
    ignore = (best_iou >= iou_neg) & ~pos
    # every gt claims its best anchor, even below threshold
    for g in range(len(gt_boxes)):
        k = int(iou[:, g].argmax())
        if iou[k, g] > 0:
            best_gt[k] = g
            pos[k] = True
            ignore[k] = False
    labels[ignore] = -1
    labels[pos] = gt_labels[best_gt[pos]] + 1
    matched[pos] = best_gt[pos]
    if pos.any():
        targets[pos] = encode(gt_boxes[best_gt[pos]], a[pos])
    return MatchResult(labels, targets, matched)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; equal scores keep the lower index first. Returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.array(keep, dtype=np.int64)
