"""Paired geometric + independent photometric augmentation.

The geometric part is a nearest-neighbour index map (zoom-in crop, zoom-out
pad, horizontal flip) computed once and applied to both spectra, so every
output pixel of the two channels comes from the same source coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..sample import GroundTruth, SpectralSample, rasterize_boxes

MIN_KEPT_FRACTION = 0.25
MAX_RESAMPLES = 10


@dataclass
class Geometry:
    """Output coordinate u maps to source coordinate u * scale + offset (per axis), then optional flip."""

    scale_x: float = 1.0
    scale_y: float = 1.0
    offset_x: float = 0.0
    offset_y: float = 0.0
    flip: bool = False

    def source_indices(self, height: int, width: int):
        xs = np.arange(width)
        if self.flip:
            xs = width - 1 - xs
        src_x = np.floor((xs + 0.5) * self.scale_x + self.offset_x).astype(np.int64)
        src_y = np.floor((np.arange(height) + 0.5) * self.scale_y + self.offset_y).astype(np.int64)
        return src_y, src_x

    def map_boxes(self, boxes: np.ndarray, width: int) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        x1 = (b[:, 0] - self.offset_x) / self.scale_x
        x2 = (b[:, 2] - self.offset_x) / self.scale_x
        y1 = (b[:, 1] - self.offset_y) / self.scale_y
        y2 = (b[:, 3] - self.offset_y) / self.scale_y
        if self.flip:
            x1, x2 = width - x2, width - x1
        return np.stack([x1, y1, x2, y2], axis=1)


def warp(image: np.ndarray, geom: Geometry, fill: np.ndarray) -> np.ndarray:
    """Apply ``geom`` to an (N, C, H, W) array; out-of-source pixels take per-channel ``fill``."""
    _, c, h, w = image.shape
    src_y, src_x = geom.source_indices(h, w)
    vy = (src_y >= 0) & (src_y < h)
    vx = (src_x >= 0) & (src_x < w)
    out = image[:, :, np.clip(src_y, 0, h - 1)][:, :, :, np.clip(src_x, 0, w - 1)].copy()
    invalid = ~(vy[:, None] & vx[None, :])
    out[:, :, invalid] = np.broadcast_to(np.asarray(fill, dtype=image.dtype).reshape(1, c, 1),
                                         (out.shape[0], c, int(invalid.sum())))
    return out


def apply_geometry(sample: SpectralSample, geom: Geometry) -> SpectralSample:
    h, w = sample.size
    vis = warp(sample.visible, geom, sample.visible.mean(axis=(0, 2, 3)))
    thr = warp(sample.thermal, geom, sample.thermal.mean(axis=(0, 2, 3)))
    mapped = geom.map_boxes(sample.gt.boxes, w)
    clipped = mapped.copy()
    clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], 0, w)
    clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], 0, h)
    area = lambda b: np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    full = area(mapped)
    keep = area(clipped) >= MIN_KEPT_FRACTION * np.where(full > 0, full, np.inf)
    boxes = clipped[keep]
    gt = GroundTruth(boxes, sample.gt.labels[keep], rasterize_boxes(boxes, h, w)[None, None],
                     tuple(t for t, k in zip(sample.gt.visibility, keep) if k))
    return SpectralSample(vis, thr, gt, dict(sample.meta))


def hflip(sample: SpectralSample) -> SpectralSample:
    return apply_geometry(sample, Geometry(flip=True))


def sample_geometry(rng: np.random.Generator, height: int, width: int) -> Geometry:
    flip = bool(rng.random() < 0.5)
    kind = rng.choice(["none", "crop", "pad"])
    if kind == "crop":
        s = rng.uniform(0.6, 1.0)
        return Geometry(s, s, rng.uniform(0, width * (1 - s)), rng.uniform(0, height * (1 - s)), flip)
    if kind == "pad":
        s = rng.uniform(1.0, 1.5)
        return Geometry(s, s, -rng.uniform(0, width * (s - 1)), -rng.uniform(0, height * (s - 1)), flip)
    return Geometry(flip=flip)


def distort(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    contrast = rng.uniform(0.8, 1.2)
    brightness = rng.uniform(-0.1, 0.1)
    mean = image.mean()
    return np.clip((image - mean) * contrast + mean + brightness, 0.0, 1.0).astype(image.dtype)


def augment_pair(sample: SpectralSample, rng: np.random.Generator) -> SpectralSample:
    h, w = sample.size
    had_objects = len(sample.gt.boxes) > 0
    out = None
    for _ in range(MAX_RESAMPLES):
        geom = sample_geometry(rng, h, w)
        cand = apply_geometry(sample, geom)
        if len(cand.gt.boxes) > 0 or not had_objects:
            out = cand
            break
    if out is None:
        out = apply_geometry(sample, Geometry(flip=geom.flip))
    return replace(out, visible=distort(out.visible, rng), thermal=distort(out.thermal, rng))
