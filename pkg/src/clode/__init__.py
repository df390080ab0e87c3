"""Conditional latent-ODE imitation learning for multi-agent trajectory prediction."""

__version__ = "0.1.0"

from .numerics import Tensor, backward, finite_diff_grad, no_grad
from .model import ModelDims, ModelParams, init_params, elbo, encode, decode, predict
from .simenv import ExpertConfig, generate_expert, rollout
from .trainer import TrainConfig, train
from .evaluator import evaluate_rollout, ablation

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_grad",
    "no_grad",
    "ModelDims",
    "ModelParams",
    "init_params",
    "elbo",
    "encode",
    "decode",
    "predict",
    "ExpertConfig",
    "generate_expert",
    "rollout",
    "TrainConfig",
    "train",
    "evaluate_rollout",
    "ablation",
]
