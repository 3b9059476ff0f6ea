"""Adam with coupled L2 penalty, and the patience learning-rate schedule."""
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import NumericalError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, l2=0.0, decay=()):
    """One Adam update, in place on the arrays in ``params``.

    ``params`` and ``grads`` map names to arrays. Names listed in ``decay``
    get ``l2 * theta`` added to their gradient before the moment updates.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        if l2 and name in decay:
            g = g + l2 * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class Adam:
    """Adam over every parameter of a :class:`~brainstate.nn.network.Network`."""

    def __init__(self, lr=1e-3, l2=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.l2 = l2
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, network):
        params, grads, decay = {}, {}, set()
        for name, layer, key in network.named_parameters():
            params[name] = layer.params[key]
            grads[name] = layer.grads[key]
            if key in layer.decay:
                decay.add(name)
        adam_step(params, grads, self.state, self.lr, self.l2, decay)


@dataclass
class PatienceSchedule:
    """Multiply the learning rate by ``decay`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is strictly below the best seen so far.
    The stall counter resets after every decay; the best loss is kept.
    """

    lr0: float
    decay: float
    patience: int
    lr: float = None
    best_loss: float = float("inf")
    stall_count: int = 0

    def __post_init__(self):
        if self.lr is None:
            self.lr = self.lr0
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def step(self, epoch_loss):
        if not np.isfinite(epoch_loss):
            raise NumericalError(f"non-finite epoch loss {epoch_loss}")
        if epoch_loss < self.best_loss:
            self.best_loss = epoch_loss
            self.stall_count = 0
        else:
            self.stall_count += 1
            if self.stall_count >= self.patience:
                self.lr *= self.decay
                self.stall_count = 0
        return self.lr
