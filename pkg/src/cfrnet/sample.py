"""Aligned visible/thermal samples and their box/mask ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VISIBILITY_TAGS = ("both", "visible_only", "thermal_only")


@dataclass
class GroundTruth:
    boxes: np.ndarray        # (G, 4) x1, y1, x2, y2 in pixels
    labels: np.ndarray       # (G,) class ids starting at 0
    mask: np.ndarray         # (1, 1, H, W) uint8, union of box interiors
    visibility: tuple = ()   # one tag per box

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.visibility = tuple(self.visibility)
        if len(self.labels) != len(self.boxes) or len(self.visibility) != len(self.boxes):
            raise ValueError("boxes, labels and visibility tags must have equal length")
        if any(tag not in VISIBILITY_TAGS for tag in self.visibility):
            raise ValueError(f"visibility tags must be in {VISIBILITY_TAGS}")


@dataclass
class SpectralSample:
    visible: np.ndarray      # (1, 3, H, W) float32 in [0, 1]
    thermal: np.ndarray      # (1, 1, H, W) float32 in [0, 1]
    gt: GroundTruth
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.visible.shape[2], self.visible.shape[3]

    @property
    def sample_id(self) -> str:
        return str(self.meta.get("id", ""))


def rasterize_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """Binary (H, W) mask; pixel (y, x) is set when its centre lies inside a box."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for x1, y1, x2, y2 in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        c0, c1 = int(np.ceil(x1 - 0.5)), int(np.ceil(x2 - 0.5))
        r0, r1 = int(np.ceil(y1 - 0.5)), int(np.ceil(y2 - 0.5))
        mask[max(r0, 0):max(min(r1, height), 0), max(c0, 0):max(min(c1, width), 0)] = 1
    return mask


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Cell is foreground when at least half of its pixels are (>= 50% coverage rule)."""
    m = np.asarray(mask, dtype=np.float64)
    lead, (h, w) = m.shape[:-2], m.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"mask size {h}x{w} not divisible by stride {stride}")
    blocks = m.reshape(*lead, h // stride, stride, w // stride, stride)
    return (blocks.mean(axis=(-3, -1)) >= 0.5).astype(np.uint8)
