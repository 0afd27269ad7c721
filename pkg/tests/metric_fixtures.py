"""Hand-computed metric fixtures shared by the metric unit tests and the acceptance run.

Expected values come from pixel counts and PR/FPPI walks done by hand.
"""
import numpy as np

from cfrnet.detector import Detection
from cfrnet.sample import GroundTruth, rasterize_boxes


def gt_of(boxes, labels=None, size=64):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(boxes), dtype=np.int64) if labels is None else np.asarray(labels)
    return GroundTruth(boxes, labels, rasterize_boxes(boxes, size, size)[None, None], ("both",) * len(boxes))


def det(box, conf, label=0):
    return Detection(tuple(float(v) for v in box), label, conf)


A = (0, 0, 10, 20)
B = (30, 0, 40, 20)
C = (0, 30, 10, 50)
MISS = (50, 50, 60, 60)   # overlaps nothing above


def mask_of(pixels, shape=(6, 6)):
    m = np.zeros(shape, dtype=bool)
    for p in pixels:
        m[p] = True
    return m


DICE_FIXTURES = [
    # (mask a, mask b, expected)
    (mask_of([(0, 0), (1, 1), (2, 2)]), mask_of([(0, 0), (1, 1), (2, 2)]), 1.0),
    (mask_of([(0, 0), (0, 1)]), mask_of([(5, 5), (4, 4)]), 0.0),
    (mask_of([(0, 0), (0, 1), (0, 2), (0, 3)]), mask_of([(0, 2), (0, 3), (0, 4), (0, 5)]), 0.5),
    (mask_of([]), mask_of([]), 1.0),
    (mask_of([(r, c) for r in range(3) for c in range(3)]), mask_of([(r, c) for r in range(2) for c in range(2)]), 8 / 13),
    (mask_of([]), mask_of([(3, 3)]), 0.0),
    (mask_of([(1, c) for c in range(5)]), mask_of([(1, 0), (1, 1), (1, 2), (4, 0), (4, 1)]), 0.6),
]


AP_FIXTURES = [
    # all detected at confidence 1, no false positives
    ([[det(A, 1.0), det(B, 1.0)]], [gt_of([A, B])], 1.0),
    # nothing detected
    ([[]], [gt_of([A])], 0.0),
    # tp then fp on one gt: recall saturates first
    ([[det(A, 0.9), det(MISS, 0.5)]], [gt_of([A])], 1.0),
    # fp then tp on one gt: precision 1/2 at full recall
    ([[det(MISS, 0.9), det(A, 0.5)]], [gt_of([A])], 0.5),
    # two gts: tp .9, fp .8, tp .7 -> 1/2 * 1 + 1/2 * 2/3
    ([[det(A, 0.9), det(MISS, 0.8), det(B, 0.7)]], [gt_of([A, B])], 0.5 + 1 / 3),
    # half the gts found
    ([[det(A, 0.9)]], [gt_of([A, B])], 0.5),
    # a duplicate on an already claimed gt is a false positive after full recall
    ([[det(A, 0.9), det(A, 0.8)]], [gt_of([A])], 1.0),
    # two images, three gts: tp .95, fp .9, tp .85, fp .6 -> 1/3 * 1 + 1/3 * 2/3
    ([[det(A, 0.95), det(MISS, 0.6)], [det(MISS, 0.9), det(C, 0.85)]], [gt_of([A, B]), gt_of([C])], 5 / 9),
]


def single_gt_images(n):
    """n images, one 10x20 gt each at the same place."""
    return [gt_of([A]) for _ in range(n)]


def lamr_case_twenty_images():
    # 10 tps, 1 fp (fppi 0.05), 5 tps, 5 misses
    gts = single_gt_images(20)
    dets = [[] for _ in range(20)]
    conf = 1.0
    for i in range(10):
        conf -= 0.01
        dets[i].append(det(A, conf))
    conf -= 0.01
    dets[19].append(det(MISS, conf))
    for i in range(10, 15):
        conf -= 0.01
        dets[i].append(det(A, conf))
    # grid points below 0.05: 3 at mr 1/2; 6 at mr 1/4
    return dets, gts, 0.5 ** (5 / 3)


def lamr_case_four_images():
    # fp, tp, tp, fp, tp with 4 gts: mr 1 below fppi .25, .5 at .316, .25 at .562 and 1
    gts = single_gt_images(4)
    dets = [[det(MISS, 0.9)], [det(A, 0.8)], [det(A, 0.7)], [det(MISS, 0.6)]]
    dets[0].append(det(A, 0.5))
    return dets, gts, 0.5 ** (5 / 9)


LAMR_FIXTURES = [
    # perfect detector
    ([[det(A, 0.9)], [det(A, 0.8)]], single_gt_images(2), 0.0),
    # outputs nothing
    ([[], []], single_gt_images(2), 1.0),
    # one image, one gt, missed, no false positives
    ([[]], single_gt_images(1), 1.0),
    # one of two gts found, no false positives: flat 0.5
    ([[det(A, 0.9)]], [gt_of([A, B])], 0.5),
    lamr_case_twenty_images(),
    lamr_case_four_images(),
]
