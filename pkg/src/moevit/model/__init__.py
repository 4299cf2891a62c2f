from .checkpoint import Checkpoint
from .data import Dataset, load_dataset, synthetic_motifs
from .probe import linear_probe
from .train import TrainConfig, TrainingDiverged, TrainResult, evaluate, train
from .vit import ForwardOptions, ForwardResult, ModelConfig, init_params, model_forward, patchify

__all__ = [
    "Checkpoint",
    "Dataset",
    "ForwardOptions",
    "ForwardResult",
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "evaluate",
    "init_params",
    "linear_probe",
    "load_dataset",
    "model_forward",
    "patchify",
    "synthetic_motifs",
    "train",
]
