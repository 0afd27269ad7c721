"""Decoding, confidence filtering and per-class NMS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..sample import SpectralSample
from .anchors import decode, nms

NMS_IOU = 0.45
CONF_THRESHOLD = 0.05
MAX_DETECTIONS = 100


@dataclass
class Detection:
    box: tuple          # x1, y1, x2, y2
    label: int
    confidence: float


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def postprocess(cls_logits: np.ndarray, box_deltas: np.ndarray, anchors: np.ndarray, image_size,
                nms_iou: float = NMS_IOU, conf_threshold: float = CONF_THRESHOLD,
                max_detections: int = MAX_DETECTIONS) -> list[Detection]:
    """One image: (A, K+1) logits and (A, 4) offsets to a confidence-sorted detection list."""
    height, width = (image_size, image_size) if np.isscalar(image_size) else image_size
    probs = softmax(cls_logits.astype(np.float64))
    boxes = decode(box_deltas, anchors)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    found = []
    for k in range(1, probs.shape[1]):
        scores = probs[:, k]
        # strict inequality: a threshold of 1.0 admits nothing
        cand = np.flatnonzero(valid & (scores > conf_threshold))
        if cand.size == 0:
            continue
        keep = cand[nms(boxes[cand], scores[cand], nms_iou)]
        found.extend((float(scores[i]), int(i), k - 1) for i in keep)
    found.sort(key=lambda t: (-t[0], t[1]))
    return [Detection(tuple(float(v) for v in boxes[i]), label, score)
            for score, i, label in found[:max_detections]]


def detect(sample: SpectralSample, model, nms_iou: float = NMS_IOU, conf_threshold: float = CONF_THRESHOLD,
           loops: Optional[int] = None) -> list[Detection]:
    out = model.infer(sample.visible, sample.thermal, loops=loops)
    return postprocess(out.cls_logits.data[0], out.box_deltas.data[0], model.anchors,
                       sample.size, nms_iou, conf_threshold)


def detect_batch(samples, model, nms_iou: float = NMS_IOU, conf_threshold: float = CONF_THRESHOLD,
                 loops: Optional[int] = None, batch_size: int = 16):
    """Detections plus the raw outputs needed for mask metrics, per sample."""
    results = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        vis = np.concatenate([s.visible for s in chunk])
        thr = np.concatenate([s.thermal for s in chunk])
        out = model.infer(vis, thr, loops=loops)
        for j, s in enumerate(chunk):
            dets = postprocess(out.cls_logits.data[j], out.box_deltas.data[j], model.anchors, s.size,
                               nms_iou, conf_threshold)
            masks_t = [m.data[j, 0] for m in out.mask_logits_t]
            masks_v = [m.data[j, 0] for m in out.mask_logits_v]
            results.append((dets, masks_t, masks_v))
    return results
