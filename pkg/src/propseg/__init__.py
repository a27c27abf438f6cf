"""Online video instance segmentation by propagating query-proposal pairs."""

__version__ = "0.1.0"

from .boxes import Box, FrameSize
from .engine import LiteSchedule, TrainConfig, infer_video, load_checkpoint, save_checkpoint, train
from .evaluate import EvalReport, VideoInstanceResult, association_accuracy, sequence_iou, video_ap
from .net import NetConfig, PropSegNet
from .synth import EventRates, SyntheticVideo, generate_video, read_dataset, write_dataset

__all__ = [
    "Box",
    "FrameSize",
    "NetConfig",
    "PropSegNet",
    "TrainConfig",
    "LiteSchedule",
    "train",
    "infer_video",
    "save_checkpoint",
    "load_checkpoint",
    "EvalReport",
    "VideoInstanceResult",
    "sequence_iou",
    "video_ap",
    "association_accuracy",
    "EventRates",
    "SyntheticVideo",
    "generate_video",
    "read_dataset",
    "write_dataset",
    "__version__",
]
