from .anchors import AnchorBox, decode, encode, generate_anchors, iou_matrix, match_anchors, nms
from .augment import augment_pair, hflip
from .inference import Detection, detect, detect_batch
from .loss import LossTerms, Targets, build_targets, joint_loss
from .model import Detector, DetectorConfig, DetectorOutput, preset

__all__ = [
    "AnchorBox", "Detection", "Detector", "DetectorConfig", "DetectorOutput", "LossTerms", "Targets",
    "augment_pair", "build_targets", "decode", "detect", "detect_batch", "encode", "generate_anchors",
    "hflip", "iou_matrix", "joint_loss", "match_anchors", "nms", "preset",
]
