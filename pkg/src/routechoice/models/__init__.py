from .dcm import (
    DCMKind,
    DCMSpec,
    FitStats,
    LogitProblem,
    PathSizeCache,
    dcm_loglik,
    fit_dcm,
    ln_path_size_matrix,
    path_size,
    rho_bar_squared,
)
from .deep import (
    DeepSpec,
    LinearUtilityModel,
    ModelKind,
    TransformerConfig,
    TransformerUtilityModel,
    build_model,
    frozen_policy_betas,
    load_model,
    save_model,
)
from .training import FittedModel, Schedule, accuracy, evaluate, loss_and_grad, train

__all__ = [
    "DCMKind", "DCMSpec", "FitStats", "LogitProblem", "PathSizeCache", "dcm_loglik", "fit_dcm",
    "ln_path_size_matrix", "path_size", "rho_bar_squared", "DeepSpec", "LinearUtilityModel",
    "ModelKind", "TransformerConfig", "TransformerUtilityModel", "build_model",
    "frozen_policy_betas", "load_model", "save_model", "FittedModel", "Schedule", "accuracy", "evaluate", "loss_and_grad",
    "train",
]
