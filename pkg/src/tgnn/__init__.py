"""Multimodal rumour detection on conversation graphs with a from-scratch autodiff core."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig  # noqa: E402
from .data import Dataset, GeneratorConfig, load_dataset, make_splits, synth_generate  # noqa: E402
from .model import TgnnModel  # noqa: E402
from .train import cross_validate, distill, evaluate, predict_soft_labels, train  # noqa: E402

__all__ = [
    "Dataset", "GeneratorConfig", "ModelConfig", "TgnnModel", "TrainConfig", "cross_validate", "distill",
    "evaluate", "load_dataset", "make_splits", "predict_soft_labels", "synth_generate", "train",
]
