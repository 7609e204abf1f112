"""Reverse-mode differentiation core, spherical CNN and MLP baselines."""

from .autodiff import Graph, Node, Parameter
from .networks import (
    MLP,
    SCNN,
    MLPConfig,
    SCNNConfig,
    build_network,
    count_params,
    global_avg_pool,
    mlp_forward,
    scnn_forward,
    sconv_layer,
    signal_relu,
)
from .optim import Adam, adam_step, step_schedule
from .pipeline import ARCHS, Estimator, batch_source, make_network, network_inputs, train_estimator
from .train import TrainConfig, TrainingError, TrainResult, train
from .weights import load_weights, save_weights

__all__ = [
    "ARCHS", "Adam", "Estimator", "Graph", "MLP", "MLPConfig", "Node", "Parameter", "SCNN",
    "SCNNConfig", "TrainConfig", "TrainResult", "TrainingError", "adam_step", "batch_source",
    "build_network", "count_params", "global_avg_pool", "load_weights", "make_network",
    "mlp_forward", "network_inputs", "save_weights", "scnn_forward", "sconv_layer",
    "signal_relu", "step_schedule", "train", "train_estimator",
]
