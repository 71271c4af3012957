"""Prototype-similarity OOD detection head with FPR95/AUROC evaluation protocols."""
from .datasets import DatasetSplit, FeatureRecord, ImageGroup, Kind, ScoredPrediction, SyntheticConfig, generate_synthetic
from .estimator import ProtoOODDetector
from .evaluator import MetricsReport, auroc, evaluate, fpr_at_95_tpr, protocol_filter
from .proto_head import ModelState, OODDecisionConfig, PrototypeBank, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainReport, train

__all__ = [
    "DatasetSplit", "FeatureRecord", "ImageGroup", "Kind", "ScoredPrediction", "SyntheticConfig",
    "generate_synthetic", "ProtoOODDetector", "MetricsReport", "auroc", "evaluate", "fpr_at_95_tpr",
    "protocol_filter", "ModelState", "OODDecisionConfig", "PrototypeBank", "load_checkpoint",
    "save_checkpoint", "TrainConfig", "TrainReport", "train",
]
__version__ = "0.1.0"
