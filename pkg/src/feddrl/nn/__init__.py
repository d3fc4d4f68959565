from feddrl.nn.checkpoint import load_network, read_network, save_network, write_network
from feddrl.nn.layers import Conv2d, Dense, Identity, LeakyReLU, ReLU, Softmax, softmax
from feddrl.nn.network import Network, NonFiniteError, build_classifier
from feddrl.nn.train import (
    SgdConfig,
    cross_entropy,
    cross_entropy_loss,
    mean_loss,
    predict,
    proximal_term,
    sgd_step,
    train_epochs,
)

__all__ = [
    "Conv2d",
    "Dense",
    "Identity",
    "LeakyReLU",
    "Network",
    "NonFiniteError",
    "ReLU",
    "SgdConfig",
    "Softmax",
    "build_classifier",
    "cross_entropy",
    "cross_entropy_loss",
    "load_network",
    "mean_loss",
    "predict",
    "proximal_term",
    "read_network",
    "save_network",
    "sgd_step",
    "softmax",
    "train_epochs",
    "write_network",
]
