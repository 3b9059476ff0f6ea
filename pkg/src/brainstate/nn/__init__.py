from .layers import (
    BatchNorm,
    Bottleneck,
    Conv,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    ReLU,
    Sequential,
)
from .losses import softmax, softmax_xent
from .network import Network
from .optim import Adam, AdamState, PatienceSchedule, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "Bottleneck",
    "Conv",
    "Dense",
    "Dropout",
    "Flatten",
    "GlobalAvgPool",
    "Layer",
    "Network",
    "PatienceSchedule",
    "ReLU",
    "Sequential",
    "adam_step",
    "softmax",
    "softmax_xent",
]
