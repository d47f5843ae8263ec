"""Learned N-body dynamics: an EGNN acceleration field integrated with
symplectic Euler, plus the data, training and evaluation around it."""

from .dataset import Dataset, TrajectorySet, build_dataset, generate_dataset, load_dataset
from .egnn import DirectEgnn, DirectEgnnConfig, EgnnBackbone, EgnnConfig
from .estimators import DirectEGNNRegressor, LinearExtrapolationRegressor, PingoRegressor
from .evaluation import EvalReport, LinearExtrapolation
from .integrator import IntegratorConfig, PingoModel, PredictedPath, pingo_forward, rollout
from .physics import GenerationConfig, SystemState, Trajectory, true_accel
from .tensor import Tensor, no_grad
from .training import TrainConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DirectEGNNRegressor",
    "DirectEgnn",
    "DirectEgnnConfig",
    "EgnnBackbone",
    "EgnnConfig",
    "EvalReport",
    "GenerationConfig",
    "IntegratorConfig",
    "LinearExtrapolation",
    "LinearExtrapolationRegressor",
    "PingoModel",
    "PingoRegressor",
    "PredictedPath",
    "SystemState",
    "Tensor",
    "TrainConfig",
    "Trajectory",
    "TrajectorySet",
    "build_dataset",
    "generate_dataset",
    "load_dataset",
    "load_model",
    "no_grad",
    "pingo_forward",
    "rollout",
    "save_model",
    "train",
    "true_accel",
]
