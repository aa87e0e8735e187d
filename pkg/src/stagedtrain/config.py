"""JSON experiment configuration: schema, validation, hashing and object builders.

A minimal config only needs a seed; every other field falls back to the
desk-scale defaults. Schema (all sections optional)::

    {
      "seed": 0,
      "pipeline": "NT" | "NT-CG" | "AT" | "ST" | "ST-CG" | "ST-FULL",
      "dataset": {"kind": "synthetic", "k": 4, "n_per_class": 500, "size": 28,
                  "difficulty": 0.5, "n_test_per_class": null, "data_seed": null}
               | {"kind": "cifar10", "train": [paths], "test": [paths], "limit": null},
      "perturbation": {"family": null | "EM" | "REM" | "SP" | "OPS", "mode": "class",
                       "epsilon": 0.0313725, "ratio": 1.0, "file": null, "grid": 8,
                       "eps_a": 0.0156863, "gen": {GenConfig fields}},
      "model": {"widths": [16, 32, 64], "hidden": 128, "seed": null},
      "train": {TrainSpec fields; "gamma" and "beta" are required for ST pipelines},
      "aug": {AugConfig fields},
      "transplant": {"reference": path, "count": 1, "mode": "both"},
      "sweep": {"axis": "ratio" | "gamma" | "beta", "values": [...]},
      "checkpoint_epochs": [epochs whose weights are kept for activation dumps]
    }

``"inf"`` is accepted wherever a float is expected (e.g. ``gamma``).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import fields
from pathlib import Path

from .augment import AugConfig
from .data import ImageDataset, load_cifar10_binary, synth_shortcut_dataset
from .errors import ConfigError, IoFailure
from .nn import Network, desknet
from .pipelines import PIPELINES, TrainSpec
from .unlearnable import EPS, FAMILIES, MODES, GenConfig, PerturbationSet, gen_em, gen_ops, gen_rem, gen_sp
from .unlearnable import load as load_perturbation

SECTIONS = ("seed", "pipeline", "dataset", "perturbation", "model", "train", "aug", "transplant", "sweep",
            "checkpoint_epochs")
SWEEP_AXES = ("ratio", "gamma", "beta")

DEFAULTS = {
    "pipeline": "NT",
    "dataset": {"kind": "synthetic", "k": 4, "n_per_class": 500, "size": 28, "difficulty": 0.5,
                "n_test_per_class": None, "data_seed": None},
    "perturbation": {"family": None, "mode": "class", "epsilon": EPS, "ratio": 1.0, "file": None, "grid": 8,
                     "eps_a": 4 / 255, "gen": {}},
    "model": {"widths": [16, 32, 64], "hidden": 128, "seed": None},
    "train": {},
    "aug": {},
    "transplant": {"reference": None, "count": 1, "mode": "both"},
    "sweep": {"axis": None, "values": []},
    "checkpoint_epochs": [],
}


def _float(value, name):
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        out[key] = value
    return out


def _known(cls, section: dict, where: str, skip=()) -> dict:
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(section)


class ExperimentConfig:
    """Validated experiment description; ``to_dict`` is the canonical form that gets hashed."""

    def __init__(self, raw: dict, seed: int | None = None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        self.raw = copy.deepcopy(raw)
        if seed is None:
            seed = raw.get("seed")
        if seed is None:
            raise ConfigError("seed is mandatory (config 'seed' or --seed)")
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.seed = seed
        self.pipeline = raw.get("pipeline", DEFAULTS["pipeline"])
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        self.dataset = self._dataset(raw.get("dataset", {}))
        self.perturbation = _merge(DEFAULTS["perturbation"], raw.get("perturbation", {}), "perturbation")
        self.model = _merge(DEFAULTS["model"], raw.get("model", {}), "model")
        self.train = _known(TrainSpec, raw.get("train", {}), "train", skip=("pipeline", "aug"))
        self.aug = _known(AugConfig, raw.get("aug", {}), "aug")
        self.transplant = _merge(DEFAULTS["transplant"], raw.get("transplant", {}), "transplant")
        self.sweep = _merge(DEFAULTS["sweep"], raw.get("sweep", {}), "sweep")
        self.checkpoint_epochs = [int(e) for e in raw.get("checkpoint_epochs", [])]
        self._validate()

    @staticmethod
    def _dataset(section: dict) -> dict:
        kind = section.get("kind", "synthetic")
        if kind == "synthetic":
            return _merge(DEFAULTS["dataset"], section, "dataset")
        if kind == "cifar10":
            out = _merge({"kind": "cifar10", "train": [], "test": [], "limit": None}, section, "dataset")
            for split in ("train", "test"):
                if isinstance(out[split], str):
                    out[split] = [out[split]]
                if not out[split]:
                    raise ConfigError(f"cifar10 dataset needs at least one {split} file")
            return out
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'cifar10', got {kind!r}")

    def _validate(self):
        p = self.perturbation
        if p["family"] is not None and p["family"] not in FAMILIES:
            raise ConfigError(f"perturbation.family must be one of {FAMILIES} or null, got {p['family']!r}")
        if p["mode"] not in MODES:
            raise ConfigError(f"perturbation.mode must be one of {MODES}, got {p['mode']!r}")
        ratio = _float(p["ratio"], "perturbation.ratio")
        if not 0 <= ratio <= 1:
            raise ConfigError(f"perturbation.ratio must lie in [0, 1], got {ratio}")
        if self.pipeline.startswith("ST"):
            missing = [k for k in ("gamma", "beta") if k not in self.train]
            if missing:
                raise ConfigError(f"pipeline {self.pipeline} requires train.{' and train.'.join(missing)}")
        for key in ("gamma", "beta"):
            if key in self.train:
                self.train[key] = _float(self.train[key], f"train.{key}")
        if "beta" in self.train and not 0 < self.train["beta"] <= 1:
            raise ConfigError(f"train.beta must lie in (0, 1], got {self.train['beta']}")
        if "gamma" in self.train and not self.train["gamma"] > 0:
            raise ConfigError(f"train.gamma must be positive, got {self.train['gamma']}")
        axis = self.sweep["axis"]
        if axis is not None and axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {axis!r}")
        if self.transplant["mode"] not in ("shallow", "deep", "both"):
            raise ConfigError(f"transplant.mode must be shallow, deep or both, got {self.transplant['mode']!r}")
        try:
            self.train_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, seed: int | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoFailure(f"{path}: {exc.strerror or exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls(raw, seed)

    def to_dict(self) -> dict:
        train = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in self.train.items()}
        return {"seed": self.seed, "pipeline": self.pipeline, "dataset": self.dataset,
                "perturbation": self.perturbation, "model": self.model, "train": train, "aug": self.aug,
                "transplant": self.transplant, "sweep": self.sweep, "checkpoint_epochs": self.checkpoint_epochs}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def derive(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``derive(**{"train.gamma": 2.0})``."""
        raw = self.to_dict()
        for path, value in changes.items():
            node = raw
            *parents, leaf = path.split(".")
            for part in parents:
                node = node[part]
            node[leaf] = value
        return ExperimentConfig(raw)

    # builders

    def train_spec(self) -> TrainSpec:
        aug = AugConfig(**self.aug)
        return TrainSpec(pipeline=self.pipeline, aug=aug, **self.train)

    def datasets(self) -> tuple[ImageDataset, ImageDataset]:
        d = self.dataset
        if d["kind"] == "cifar10":
            train = load_cifar10_binary(*d["train"], split="train", limit=d["limit"])
            test = load_cifar10_binary(*d["test"], split="test")
            return train, test
        seed = self.seed if d["data_seed"] is None else d["data_seed"]
        return synth_shortcut_dataset(d["k"], d["n_per_class"], d["size"], d["difficulty"], seed,
                                      d["n_test_per_class"])

    def build_model(self, input_shape, num_classes: int, seed: int | None = None) -> Network:
        m = self.model
        if seed is None:
            seed = self.seed if m["seed"] is None else m["seed"]
        return desknet(tuple(input_shape), num_classes, seed=seed, widths=tuple(m["widths"]), hidden=m["hidden"])

    def perturbation_set(self, train: ImageDataset, on_step=None) -> PerturbationSet | None:
        """Load or generate the configured perturbation; ``None`` for clean runs."""
        p = self.perturbation
        if p["file"]:
            return load_perturbation(p["file"])
        family = p["family"]
        if family is None:
            return None
        eps = _float(p["epsilon"], "perturbation.epsilon")
        if family == "SP":
            return gen_sp(train.image_shape, train.num_classes, eps, self.seed, grid=p["grid"])
        if family == "OPS":
            return gen_ops(train.image_shape, train.num_classes, self.seed)
        gen = dict(p["gen"])
        gen.setdefault("seed", self.seed)
        cfg = GenConfig(**_known(GenConfig, gen, "perturbation.gen"))
        surrogate = self.build_model(train.image_shape, train.num_classes)
        if family == "EM":
            return gen_em(train, surrogate, eps, p["mode"], cfg, on_step)
        eps_a = _float(p["eps_a"], "perturbation.eps_a")
        return gen_rem(train, surrogate, eps, eps_a, cfg, p["mode"], on_step)
