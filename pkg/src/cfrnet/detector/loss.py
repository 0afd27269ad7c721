"""Joint detection + auxiliary segmentation objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..sample import GroundTruth, downsample_mask
from ..tensor import (
    Tensor,
    add,
    mean_of_list,
    mul_scalar,
    reshape,
    sigmoid_bce,
    smooth_l1,
    softmax_ce,
    zeros_scalar,
)
from .anchors import match_anchors
from .model import DetectorOutput

IOU_POS = 0.5
IOU_NEG = 0.4
NEG_RATIO = 3


@dataclass
class Targets:
    labels: np.ndarray        # (N, A): 0 background, k+1 class k, -1 ignore
    box_targets: np.ndarray   # (N, A, 4)
    seg_masks: np.ndarray     # (N, 1, h, w) at fusion resolution


def build_targets(gts: Sequence[GroundTruth], anchors: np.ndarray, mask_stride: int,
                  iou_pos: float = IOU_POS, iou_neg: float = IOU_NEG) -> Targets:
    labels, boxes, masks = [], [], []
    for gt in gts:
        m = match_anchors(anchors, gt.boxes, gt.labels, iou_pos, iou_neg)
        labels.append(m.labels)
        boxes.append(m.targets)
        masks.append(downsample_mask(gt.mask[0, 0], mask_stride)[None])
    return Targets(np.stack(labels), np.stack(boxes), np.stack(masks))


@dataclass
class LossTerms:
    total: Tensor
    cls: float
    loc: float
    seg: float      # already multiplied by the segmentation weight

    @property
    def det(self) -> float:
        return self.cls + self.loc


def mine_negatives(logits: np.ndarray, labels: np.ndarray, neg_ratio: int = NEG_RATIO) -> np.ndarray:
    """Hard negatives for one image: highest background loss first, ties to lower anchor index.

    With no positives, ``neg_ratio`` negatives are still kept so the classifier sees data.
    """
    bg = np.flatnonzero(labels == 0)
    if bg.size == 0:
        return bg
    x = logits[bg].astype(np.float64)
    mx = x.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=1))
    bg_loss = lse - x[:, 0]
    n_neg = min(neg_ratio * max(int((labels > 0).sum()), 1), bg.size)
    order = np.argsort(-bg_loss, kind="stable")[:n_neg]
    return np.sort(bg[order])


def joint_loss(out: DetectorOutput, targets: Targets, seg_weight: float = 1.0,
               neg_ratio: int = NEG_RATIO) -> LossTerms:
    if seg_weight < 0:
        raise ValueError("segmentation weight must be >= 0")
    n, a, k1 = out.cls_logits.shape
    logits = out.cls_logits.data
    rows = []
    for i in range(n):
        pos = np.flatnonzero(targets.labels[i] > 0)
        neg = mine_negatives(logits[i], targets.labels[i], neg_ratio)
        rows.append(np.sort(np.concatenate([pos, neg])) + i * a)
    sel = np.concatenate(rows)
    flat_labels = targets.labels.reshape(-1)
    cls_flat = reshape(out.cls_logits, (n * a, k1))
    cls_loss = softmax_ce(cls_flat[sel], flat_labels[sel])

    pos_rows = np.flatnonzero(flat_labels > 0)
    if pos_rows.size:
        box_flat = reshape(out.box_deltas, (n * a, 4))
        loc_loss = smooth_l1(box_flat[pos_rows], targets.box_targets.reshape(-1, 4)[pos_rows])
    else:
        loc_loss = zeros_scalar(logits.dtype)

    total = add(cls_loss, loc_loss)
    seg_value = 0.0
    masks = list(out.mask_logits_t) + list(out.mask_logits_v)
    if seg_weight > 0 and masks:
        target = targets.seg_masks.astype(logits.dtype)
        seg = mean_of_list([sigmoid_bce(m, target) for m in masks])
        weighted = mul_scalar(seg, seg_weight)
        seg_value = weighted.item()
        total = add(total, weighted)
    return LossTerms(total, cls_loss.item(), loc_loss.item(), seg_value)
