"""SGD with momentum, weight decay and per-layer learning rates; cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EpochOutOfRange, LengthMismatch
from .nn import Network


@dataclass
class LrSchedule:
    base_lr: float
    total_epochs: int
    kind: str = "cosine"


def cosine_lr(sched: LrSchedule, epoch: float) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * epoch / E))`` for ``0 <= epoch <= E``."""
    if sched.kind != "cosine":
        raise ValueError(f"unsupported schedule kind {sched.kind!r}")
    if not 0 <= epoch <= sched.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if sched.total_epochs == 0:
        return sched.base_lr
    lr = sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / sched.total_epochs))
    # cos(pi) is not exactly -1 in floating point
    return min(max(lr, 0.0), sched.base_lr)


@dataclass
class OptimizerState:
    momentum_buffers: list[list[np.ndarray]] = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def for_network(cls, net: Network, momentum: float = 0.9, weight_decay: float = 1e-4):
        bufs = [[np.zeros_like(p) for p in layer.params] for layer in net.param_layers]
        return cls(bufs, momentum, weight_decay)


def sgd_step(net: Network, grads, opt: OptimizerState, lr_per_layer):
    """One in-place SGD update.

    ``buf <- momentum*buf + grad + wd*p`` then ``p <- p - lr_i*buf``, where
    ``lr_i = lr_per_layer[i] * layer.lr_multiplier``. Biases get no weight
    decay and frozen layers are skipped entirely.
    """
    layers = net.param_layers
    if len(lr_per_layer) != len(layers) or len(grads) != len(layers):
        raise LengthMismatch(
            f"need {len(layers)} learning rates and gradient groups, "
            f"got {len(lr_per_layer)} and {len(grads)}"
        )
    if any(lr < 0 for lr in lr_per_layer):
        raise ValueError("learning rates must be nonnegative")
    for layer, lgrads, bufs, lr in zip(layers, grads, opt.momentum_buffers, lr_per_layer):
        if layer.frozen:
            continue
        step = layer.params[0].dtype.type(lr * layer.lr_multiplier)
        for j, (p, g, buf) in enumerate(zip(layer.params, lgrads, bufs)):
            buf *= opt.momentum
            buf += g
            if opt.weight_decay and j == 0:
                buf += opt.weight_decay * p
            if step:
                p -= step * buf
