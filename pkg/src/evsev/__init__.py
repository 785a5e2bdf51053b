"""Evidential smoke-severity classification with CBAM attention on a small numpy autodiff core."""
from .evidential import DirichletOutput, decompose_uncertainty, total_loss
from .labeling import Severity, classify_severity, label_patch
from .model import ModelConfig, forward, init_params, predict_batch, train

__all__ = [
    "DirichletOutput", "ModelConfig", "Severity", "classify_severity", "decompose_uncertainty",
    "forward", "init_params", "label_patch", "predict_batch", "total_loss", "train",
]
