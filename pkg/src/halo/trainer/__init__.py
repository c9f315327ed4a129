from .analysis import (
    SensitivityReport,
    ablation_csv,
    default_variants,
    grad_rel_error,
    numerical_grad,
    placement_ablation,
    sensitivity_report,
)
from .data import DataConfig, GlyphClassification, TeacherRegression, make_dataset
from .loop import DivergenceError, TrainResult, evaluate, train
from .model import ModelConfig, ToyModel, cross_entropy_loss, init_params, mse_loss
from .norm import distributivity_probe, rmsnorm_backward, rmsnorm_forward, rmsnorm_jacobian
from .optim import AdamW, AdamWConfig, OptimizerState
