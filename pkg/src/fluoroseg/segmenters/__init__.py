from .common import Detection, box_iou, nms, segment
from .proto import ProtoBackend, ProtoModel, TrainConfig, assemble_detections, protonet_forward, train
from .threshold import ThresholdBackend, ThresholdConfig, otsu_threshold, threshold_segment

__all__ = [
    "Detection",
    "ProtoBackend",
    "ProtoModel",
    "ThresholdBackend",
    "ThresholdConfig",
    "TrainConfig",
    "assemble_detections",
    "box_iou",
    "nms",
    "otsu_threshold",
    "protonet_forward",
    "segment",
    "threshold_segment",
    "train",
]
