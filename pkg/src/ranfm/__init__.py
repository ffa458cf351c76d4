"""Patch-based masked-reconstruction foundation model for RAN telemetry, in numpy."""
from .model import Model, ModelConfig, ParameterSet
from .training import TrainConfig, finetune, pretrain
from .tasks import EvalReport, evaluate

__version__ = "0.1.0"
__all__ = ["Model", "ModelConfig", "ParameterSet", "TrainConfig", "pretrain", "finetune",
           "EvalReport", "evaluate"]
