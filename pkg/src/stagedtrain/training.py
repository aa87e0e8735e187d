"""One-epoch minibatch training shared by every pipeline, plus PGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import Augmenter
from .data import ImageDataset
from .nn import Network, backward, cross_entropy, forward, layer_grad_mean
from .optim import OptimizerState, sgd_step


@dataclass
class EpochStats:
    loss: float
    train_acc: float
    gmv: list[float]  # per parameterized layer, averaged over steps


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order for ``epoch``; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def pgd_attack(net: Network, x: np.ndarray, y, eps: float, steps: int = 10, step_size: float = 1 / 255,
               rng=None, random_start: bool = True) -> np.ndarray:
    """L-inf PGD ascent on the cross-entropy; returns the adversarial images."""
    if eps <= 0 or steps <= 0:
        return x
    x = x.astype(net.dtype)
    if random_start:
        rng = np.random.default_rng() if rng is None else rng
        delta = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)
    delta = np.clip(x + delta, 0, 1) - x
    for _ in range(steps):
        logits, _ = forward(net, x + delta, record=True)
        _, g = cross_entropy(logits, y)
        _, gx = backward(net, g)
        delta = np.clip(delta + step_size * np.sign(gx), -eps, eps)
        delta = np.clip(x + delta, 0, 1) - x
    net.clear_state()
    return (x + delta).astype(x.dtype)


def train_epoch(
    net: Network,
    opt: OptimizerState,
    data: ImageDataset,
    lr_per_layer,
    *,
    epoch: int,
    seed: int,
    batch_size: int = 128,
    augment: Augmenter | None = None,
    adversary: dict | None = None,
) -> EpochStats:
    """Shuffle, augment, and take one SGD step per minibatch.

    ``adversary`` (``{"eps", "steps", "step_size"}``) switches to PGD
    adversarial training on the augmented batch.
    """
    n = len(data)
    order = epoch_order(n, seed, epoch)
    adv_rng = np.random.default_rng([seed, epoch, 0xAD7]) if adversary else None
    gmv = np.zeros(net.depth_l)
    steps = 0
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = data.images[idx]
        y = data.labels[idx]
        if augment is not None:
            x = augment(x, idx, epoch)
        if adversary:
            x = pgd_attack(net, x, y, adversary["eps"], adversary.get("steps", 10),
                           adversary.get("step_size", 1 / 255), adv_rng)
        logits, _ = forward(net, x, record=True)
        loss, g = cross_entropy(logits, y)
        grads, _ = backward(net, g, need_input_grad=False)
        sgd_step(net, grads, opt, lr_per_layer)
        gmv += [layer_grad_mean(grads, i) for i in range(net.depth_l)]
        steps += 1
        correct += int((logits.argmax(axis=1) == y).sum())
        loss_sum += loss * len(idx)
    net.clear_state()
    return EpochStats(loss_sum / max(n, 1), correct / max(n, 1), list(gmv / max(steps, 1)))
