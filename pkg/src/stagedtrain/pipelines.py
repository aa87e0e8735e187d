"""The six training pipelines, gamma calibration and the layer-transplant experiment.

Pipeline matrix:

=========  ==========  ===  ==========
pipeline   rate adjust  CG   CG fine-tune
=========  ==========  ===  ==========
NT         no          no   no
NT-CG      no          yes  no
AT         no          no   no   (PGD adversarial training)
ST         yes         no   no
ST-CG      yes         yes  no
ST-FULL    yes         yes  yes
=========  ==========  ===  ==========
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .acm import acm_of_model
from .augment import AugConfig, Augmenter
from .data import ImageDataset
from .nn import Network, accuracy, desknet, transplant
from .optim import LrSchedule, OptimizerState, cosine_lr
from .staged import EpochRecord, STConfig, TrainLog, acm_indicator, run_st, select_validation_subset
from .training import train_epoch

PIPELINES = ("NT", "NT-CG", "AT", "ST", "ST-CG", "ST-FULL")

# Desk-scale rates: the reference rates (0.1 / 0.2 / 0.3) scaled by 0.1, which keeps the
# un-normalized small net stable at the fine-tune rate.
DESK_LR = 0.01
DESK_LR_CG = 0.02
DESK_LR_FT = 0.03


@dataclass
class TrainSpec:
    pipeline: str = "NT"
    epochs: int = 40
    base_lr: float = DESK_LR
    cg_lr: float = DESK_LR_CG  # base rate of the ST-CG stage
    gamma: float = math.inf
    beta: float = 0.25
    validation_per_class: int = 100
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    finetune_fraction: float = 0.3
    finetune_lr: float = DESK_LR_FT
    finetune_keep_coefficients: bool = True  # fine-tune at H x rate; False gives a plain fine-tune
    at_eps: float = 4 / 255
    at_steps: int = 10
    at_step_size: float = 1 / 255
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; expected one of {PIPELINES}")

    @property
    def staged(self) -> bool:
        return self.pipeline.startswith("ST")

    @property
    def uses_cg(self) -> bool:
        return self.pipeline in ("NT-CG", "ST-CG", "ST-FULL")

    @property
    def finetune_epochs(self) -> int:
        return int(round(self.finetune_fraction * self.epochs)) if self.pipeline == "ST-FULL" else 0

    def augmenter(self, seed: int, cg: bool | None = None) -> Augmenter:
        cg = self.uses_cg if cg is None else cg
        base = tuple(op for op in self.aug.enabled if op != "cg")
        cfg = AugConfig(**{**self.aug.__dict__, "enabled": base + (("cg",) if cg else ())})
        return Augmenter(cfg, seed)


@dataclass
class RunResult:
    net: Network
    log: TrainLog
    test_acc: float
    finetune_log: TrainLog | None = None

    @property
    def final_acm(self) -> float:
        return self.log.records[-1].acm if self.log.records else float("nan")

    @property
    def full_log(self) -> TrainLog:
        """Main-phase records followed by any fine-tune records."""
        extra = self.finetune_log.records if self.finetune_log else []
        return TrainLog(self.log.records + extra)


def natural_training(net: Network, data: ImageDataset, spec: TrainSpec, *, seed: int, test=None,
                     augment=None, adversary=None, base_lr=None, epochs=None, subset=None,
                     on_epoch=None, epoch_offset: int = 0, coefficients=None) -> TrainLog:
    """Plain cosine-decayed SGD. ACM on ``subset`` is logged when one is given.

    ``coefficients`` scales the rate per layer (all ones when omitted).
    """
    epochs = spec.epochs if epochs is None else epochs
    sched = LrSchedule(spec.base_lr if base_lr is None else base_lr, epochs)
    opt = OptimizerState.for_network(net, spec.momentum, spec.weight_decay)
    ind = acm_indicator(subset) if subset is not None else None
    log = TrainLog()
    h = [1.0] * net.depth_l if coefficients is None else [float(c) for c in coefficients]
    for e in range(1, epochs + 1):
        lr = cosine_lr(sched, e - 1)
        stats = train_epoch(net, opt, data, [lr * c for c in h], epoch=e + epoch_offset, seed=seed,
                            batch_size=spec.batch_size, augment=augment, adversary=adversary)
        test_acc = accuracy(net, test.images, test.labels) if test is not None else float("nan")
        value = float(ind(net, e)) if ind is not None else float("nan")
        rec = EpochRecord(e + epoch_offset, stats.train_acc, test_acc, value, 0, False, h, stats.gmv, lr,
                          stats.loss)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec, net)
    return log


def run_pipeline(data: ImageDataset, test: ImageDataset, spec: TrainSpec, *, seed: int = 0,
                 net: Network | None = None, model_seed: int | None = None, on_epoch=None,
                 track_acm: bool = True) -> RunResult:
    """Train a fresh desknet (or ``net``) with the requested pipeline."""
    if net is None:
        net = desknet(data.image_shape, data.num_classes, seed=seed if model_seed is None else model_seed)
    subset = None
    if track_acm or spec.staged:
        subset = select_validation_subset(data, spec.validation_per_class, seed)
    aug = spec.augmenter(seed)
    state = None
    if spec.staged:
        base = spec.cg_lr if spec.uses_cg else spec.base_lr
        cfg = STConfig(gamma=spec.gamma, beta=spec.beta, epochs=spec.epochs, base_lr=base,
                       validation_per_class=spec.validation_per_class, batch_size=spec.batch_size,
                       momentum=spec.momentum, weight_decay=spec.weight_decay)
        _, log, state = run_st(net, data, cfg, seed=seed, test=test, augment=aug, subset=subset, on_epoch=on_epoch)
    else:
        adversary = None
        if spec.pipeline == "AT":
            adversary = {"eps": spec.at_eps, "steps": spec.at_steps, "step_size": spec.at_step_size}
        base = spec.cg_lr if spec.uses_cg else spec.base_lr
        log = natural_training(net, data, spec, seed=seed, test=test, augment=aug, adversary=adversary,
                               base_lr=base, subset=subset, on_epoch=on_epoch)
    ft_log = None
    if spec.finetune_epochs:
        ft_log = natural_training(net, data, spec, seed=seed, test=test, augment=spec.augmenter(seed, cg=True),
                                  base_lr=spec.finetune_lr, epochs=spec.finetune_epochs, subset=subset,
                                  epoch_offset=spec.epochs, on_epoch=on_epoch,
                                  coefficients=state.H if spec.finetune_keep_coefficients and state else None)
    return RunResult(net, log, accuracy(net, test.images, test.labels), ft_log)


def calibrate_gamma(clean: ImageDataset, test: ImageDataset, spec: TrainSpec, *, seed: int = 0,
                    factor: float = 1.5) -> tuple[float, TrainLog]:
    """gamma = ``factor`` x the peak ACM of natural training on clean data."""
    nt = TrainSpec(**{**spec.__dict__, "pipeline": "NT"})
    res = run_pipeline(clean, test, nt, seed=seed)
    return gamma_from_log(res.log, factor), res.log


def gamma_from_log(log: TrainLog, factor: float = 1.5) -> float:
    """``factor`` x the peak finite ACM of a clean natural-training log."""
    finite = [r.acm for r in log.records if math.isfinite(r.acm)]
    if not finite:
        raise ValueError("log holds no finite ACM values")
    return factor * max(finite)


@dataclass
class TransplantResult:
    shallow_acc: float  # M^S: clean shallow layers frozen
    deep_acc: float  # M^D: clean deep layers frozen
    clean_acc: float
    shallow_log: TrainLog | None
    deep_log: TrainLog | None
    nets: dict = field(default_factory=dict)


def transplant_model(reference: Network, mode: str, count: int = 1, seed: int = 0, factory=None) -> Network:
    """Fresh net with ``count`` clean layers copied and frozen at the front (shallow) or back (deep).

    ``factory(seed)`` builds the fresh network; it defaults to a desknet shaped like ``reference``.
    """
    if factory is None:
        net = desknet(reference.input_shape, reference.num_classes, seed=seed)
    else:
        net = factory(seed)
    if mode == "shallow":
        layers = range(count)
    elif mode == "deep":
        layers = range(net.depth_l - count, net.depth_l)
    else:
        raise ValueError(f"mode must be 'shallow' or 'deep', got {mode!r}")
    transplant(net, reference, layers, freeze=True)
    return net


def transplant_experiment(reference: Network, perturbed: ImageDataset, test: ImageDataset, spec: TrainSpec,
                          *, seed: int = 0, count: int = 1, model_seed: int = 1, factory=None,
                          modes=("shallow", "deep")) -> TransplantResult:
    """Train M^S and M^D on perturbed data and compare their clean test accuracy."""
    nt = TrainSpec(**{**spec.__dict__, "pipeline": "NT"})
    out = {}
    for mode in modes:
        net = transplant_model(reference, mode, count, seed=model_seed, factory=factory)
        out[mode] = run_pipeline(perturbed, test, nt, seed=seed, net=net, track_acm=False)
    nan = float("nan")
    return TransplantResult(out["shallow"].test_acc if "shallow" in out else nan,
                            out["deep"].test_acc if "deep" in out else nan,
                            accuracy(reference, test.images, test.labels),
                            out["shallow"].log if "shallow" in out else None,
                            out["deep"].log if "deep" in out else None,
                            {m: r.net for m, r in out.items()})


def final_acm(net: Network, data: ImageDataset, per_class: int = 100, seed: int = 0) -> float:
    sub = select_validation_subset(data, per_class, seed)
    return acm_of_model(net, sub.images, sub.labels)


def summarize(results: dict) -> dict:
    return {name: float(np.round(r.test_acc, 4)) for name, r in results.items()}
