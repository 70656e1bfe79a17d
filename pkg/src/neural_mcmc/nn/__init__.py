"""Small dense-network engine: autograd, layers, Adam and the training loop."""

from neural_mcmc.nn.autograd import Tensor, concat, elu, exp, log, relu, square, tanh, value
from neural_mcmc.nn.layers import DenseLayer, Mlp, ParameterSet, dense_forward, xavier_uniform
from neural_mcmc.nn.optim import AdamState, adam_step, lr_schedule
from neural_mcmc.nn.train import TrainConfig, TrainResult, train_loop

__all__ = [
    "AdamState",
    "DenseLayer",
    "Mlp",
    "ParameterSet",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "concat",
    "dense_forward",
    "elu",
    "exp",
    "log",
    "lr_schedule",
    "relu",
    "square",
    "tanh",
    "train_loop",
    "value",
    "xavier_uniform",
]
