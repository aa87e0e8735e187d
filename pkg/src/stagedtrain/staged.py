"""Progressive staged training: ACM-triggered rollback with per-layer rate shrinkage.

Each epoch: attenuate the base rate, scale it per layer by the current
coefficient vector ``H``, train, then measure ACM on a small labelled subset
of the training data. When ACM exceeds ``gamma`` (and the trigger counter is
below ``1/beta - 1``) the network is rolled back to the last good checkpoint
and ``H`` is recomputed with a larger counter, which slows shallow layers
first. Otherwise the epoch is kept and becomes the new checkpoint.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_mod
from .acm import acm_of_model
from .checkpoint import Checkpoint
from .data import ImageDataset
from .errors import DegenerateCluster, InsufficientClassSamples, NonPositiveBeta, NonPositiveTau, RollbackWithoutCheckpoint
from .nn import Network, accuracy
from .optim import LrSchedule, OptimizerState, cosine_lr
from .training import train_epoch


@dataclass
class STConfig:
    gamma: float
    beta: float = 0.25
    epochs: int = 40
    base_lr: float = 0.1
    validation_per_class: int = 100
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.beta <= 0 or self.beta > 1:
            raise NonPositiveBeta(f"beta must lie in (0, 1], got {self.beta}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.epochs)

    @property
    def tau_cap(self) -> int:
        """Largest reachable counter: the trigger needs ``tau < 1/beta - 1``."""
        return max(0, math.ceil(1 / Fraction(self.beta).limit_denominator(10**6)) - 1)


@dataclass
class STState:
    tau: int
    H: np.ndarray
    H_tmp: np.ndarray
    checkpoint: Checkpoint
    epoch: int = 0

    @classmethod
    def initial(cls, net: Network, opt: OptimizerState) -> "STState":
        ones = np.ones(net.depth_l)
        # theta_tmp <- theta at initialization
        return cls(0, ones, ones.copy(), ckpt_mod.snapshot(net, opt, 0))


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    test_acc: float
    acm: float
    tau: int
    rollback: bool
    alpha: list[float]  # multipliers applied during this epoch
    gmv: list[float]
    lr: float = 0.0
    loss: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    @property
    def rollbacks(self) -> list[int]:
        return [r.epoch for r in self.records if r.rollback]

    def header(self, depth: int) -> list[str]:
        return (["epoch", "train_acc", "test_acc", "acm", "tau", "rollback"]
                + [f"alpha_{i}" for i in range(1, depth + 1)]
                + [f"gmv_{i}" for i in range(1, depth + 1)])

    def write_csv(self, path, depth: int | None = None) -> Path:
        if depth is None:
            depth = len(self.records[0].alpha) if self.records else 0
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header(depth))
            for r in self.records:
                w.writerow([r.epoch, repr(float(r.train_acc)), repr(float(r.test_acc)), repr(float(r.acm)), r.tau, int(r.rollback)]
                           + [repr(float(a)) for a in r.alpha] + [repr(float(g)) for g in r.gmv])
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            return log
        head = rows[0]
        depth = sum(1 for h in head if h.startswith("alpha_"))
        for row in rows[1:]:
            d = dict(zip(head, row))
            log.append(EpochRecord(
                epoch=int(d["epoch"]), train_acc=float(d["train_acc"]), test_acc=float(d["test_acc"]),
                acm=float(d["acm"]), tau=int(d["tau"]), rollback=bool(int(d["rollback"])),
                alpha=[float(d[f"alpha_{i}"]) for i in range(1, depth + 1)],
                gmv=[float(d[f"gmv_{i}"]) for i in range(1, depth + 1)],
            ))
        return log


def adjust_coefficients(tau: int, beta: float, depth: int) -> np.ndarray:
    """``alpha_i = 1 - 1/(1 + exp(i/(beta*tau) - l))`` for ``i = 1..l``."""
    if tau < 1:
        raise NonPositiveTau(f"tau must be >= 1, got {tau}")
    if beta <= 0:
        raise NonPositiveBeta(f"beta must be positive, got {beta}")
    i = np.arange(1, depth + 1, dtype=np.float64)
    z = i / (beta * tau) - depth
    # 1 - 1/(1+e^z) == 1/(1+e^-z); this form stays exact at z = 0 and never overflows
    return 1.0 / (1.0 + np.exp(-z))


def coefficient_gaps(tau: int, beta: float, depth: int) -> np.ndarray:
    """``1 - alpha_i`` computed directly, so it stays resolvable where alpha rounds to 1."""
    if tau < 1:
        raise NonPositiveTau(f"tau must be >= 1, got {tau}")
    if beta <= 0:
        raise NonPositiveBeta(f"beta must be positive, got {beta}")
    z = np.arange(1, depth + 1, dtype=np.float64) / (beta * tau) - depth
    return 1.0 / (1.0 + np.exp(z))


def select_validation_subset(data: ImageDataset, per_class: int, seed: int) -> ImageDataset:
    """Exactly ``per_class`` samples of every class, deterministic under ``seed``."""
    counts = data.class_counts()
    short = [c for c in range(data.num_classes) if counts[c] < per_class]
    if short:
        raise InsufficientClassSamples(f"classes {short} have fewer than {per_class} samples")
    rng = np.random.default_rng([seed, 0xD5])
    picks = [rng.choice(np.flatnonzero(data.labels == c), per_class, replace=False)
             for c in range(data.num_classes)]
    return data.subset(np.sort(np.concatenate(picks)))


Indicator = Callable[[Network, int], float]


def acm_indicator(subset: ImageDataset) -> Indicator:
    """ACM on ``subset``; collapsed clusters report ``inf``, the limit of the ratio."""
    def indicator(net: Network, epoch: int) -> float:
        try:
            return acm_of_model(net, subset.images, subset.labels)
        except DegenerateCluster:
            return math.inf
    return indicator


def epoch_rate(sched: LrSchedule, epoch: int) -> float:
    """Attenuated base rate used while training epoch ``epoch`` (1-based)."""
    return cosine_lr(sched, epoch - 1)


def st_epoch(
    net: Network,
    opt: OptimizerState,
    data: ImageDataset,
    config: STConfig,
    state: STState,
    indicator: Indicator,
    *,
    seed: int,
    augment=None,
    adversary=None,
    test: ImageDataset | None = None,
) -> EpochRecord:
    """Advance ``state`` by one epoch in place and return the log record."""
    e = state.epoch + 1
    base = epoch_rate(config.schedule, e)
    alpha = state.H.copy()
    lrs = [float(a) * base for a in alpha]
    stats = train_epoch(net, opt, data, lrs, epoch=e, seed=seed, batch_size=config.batch_size,
                        augment=augment, adversary=adversary)
    test_acc = accuracy(net, test.images, test.labels) if test is not None else float("nan")
    value = indicator(net, e)
    rollback = bool(value > config.gamma and state.tau < 1 / config.beta - 1)
    if rollback:
        if state.checkpoint is None:
            raise RollbackWithoutCheckpoint(f"overfitting signalled at epoch {e} with no checkpoint")
        state.tau += 1
        ckpt_mod.restore(net, opt, state.checkpoint)
        H = adjust_coefficients(state.tau, config.beta, net.depth_l)
    else:
        H = np.ones(net.depth_l) if state.tau == 0 else state.H_tmp.copy()
        state.checkpoint = ckpt_mod.snapshot(net, opt, e)
    state.H = H
    state.H_tmp = H.copy()
    state.epoch = e
    return EpochRecord(e, stats.train_acc, test_acc, float(value), state.tau, rollback,
                       list(alpha), stats.gmv, base, stats.loss)


def run_st(
    net: Network,
    data: ImageDataset,
    config: STConfig,
    *,
    seed: int = 0,
    test: ImageDataset | None = None,
    augment=None,
    adversary=None,
    indicator: Indicator | None = None,
    subset: ImageDataset | None = None,
    opt: OptimizerState | None = None,
    on_epoch: Callable[[EpochRecord, Network], None] | None = None,
):
    """Run ``config.epochs`` staged epochs; returns ``(net, log, state)``."""
    log = TrainLog()
    if opt is None:
        opt = OptimizerState.for_network(net, config.momentum, config.weight_decay)
    state = STState.initial(net, opt)
    if config.epochs == 0:
        return net, log, state
    if indicator is None:
        if subset is None:
            subset = select_validation_subset(data, config.validation_per_class, seed)
        indicator = acm_indicator(subset)
    for _ in range(config.epochs):
        rec = st_epoch(net, opt, data, config, state, indicator, seed=seed, augment=augment,
                       adversary=adversary, test=test)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec, net)
    return net, log, state
