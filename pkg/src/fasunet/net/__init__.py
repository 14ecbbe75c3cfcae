"""Differentiable FAS-Unet built on a small reverse-mode tape."""
from .network import NetConfig, ParamStore, forward, init_params, param_count, predict
from .train import TrainConfig, check_network_gradients, gradient_check, sgd_step, train

__all__ = [
    "NetConfig", "ParamStore", "TrainConfig", "check_network_gradients", "forward",
    "gradient_check", "init_params", "param_count", "predict", "sgd_step", "train",
]
