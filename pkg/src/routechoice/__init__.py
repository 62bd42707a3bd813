"""Transit route-choice models: logit baselines, constrained CNN utilities and transformer utilities."""
from .core import (
    CardType,
    Category,
    ChoiceObservation,
    EvalReport,
    NumericalError,
    ParameterTable,
    Route,
    StructuralError,
)
from .features import ChoiceData, TransformSpec
from .models import DCMKind, DCMSpec, DeepSpec, ModelKind, Schedule, TransformerConfig, build_model, fit_dcm

__version__ = "0.1.0"

__all__ = [
    "CardType", "Category", "ChoiceObservation", "EvalReport", "NumericalError", "ParameterTable",
    "Route", "StructuralError", "ChoiceData", "TransformSpec", "DCMKind", "DCMSpec", "DeepSpec",
    "ModelKind", "Schedule", "TransformerConfig", "build_model", "fit_dcm",
]
