"""Command-line harness: generate | train | sweep | transplant | report | calibrate-gamma.

Every command prints one JSON line on success and exits 0. Failures print a
single ``error: <Kind>: <message>`` line on stderr and exit nonzero (2 for
configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import unlearnable as ul
from .acm import dump_activations, penultimate_activations
from .config import SWEEP_AXES, ExperimentConfig
from .errors import ConfigError, MissingLogs, MissingReferenceCheckpoint, StagedTrainError
from .pipelines import calibrate_gamma, run_pipeline, transplant_experiment
from .staged import TrainLog, select_validation_subset

SWEEP_PATHS = {"ratio": "perturbation.ratio", "gamma": "train.gamma", "beta": "train.beta"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def _emit(obj):
    print(json.dumps(_jsonable(obj), sort_keys=True))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    return ExperimentConfig.load(args.config, seed=args.seed)


def prepare_data(cfg: ExperimentConfig, pset=None):
    """``(train, clean_train, test, pset)`` with the configured perturbation applied."""
    clean, test = cfg.datasets()
    if pset is None:
        pset = cfg.perturbation_set(clean)
    train = clean
    if pset is not None:
        train = ul.apply_perturbations(clean, pset, cfg.perturbation["ratio"], cfg.seed)
    return train, clean, test, pset


def audit(pset) -> dict:
    out = {"family": pset.family, "mode": pset.mode, "count": len(pset), "epsilon": pset.epsilon,
           "max_abs": pset.max_abs(), "converged": pset.converged}
    if pset.family == "OPS":
        out["nonzero_pixels"] = pset.nonzero_pixels().tolist()
    return out


def train_run(cfg: ExperimentConfig, out: Path) -> dict:
    """Train one configuration into ``out`` and return its report."""
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    _write_json(out / "config.json", cfg.to_dict())
    report = {"config_hash": cfg.config_hash(), "pipeline": cfg.pipeline, "seed": cfg.seed, "error": None,
              "log": "log.csv", "checkpoint": "model.ckpt"}
    try:
        train, _, test, pset = prepare_data(cfg)
        if pset is not None and not cfg.perturbation["file"]:
            ul.save(pset, out / "perturbation.stpert")
        keep = set(cfg.checkpoint_epochs)
        if keep:
            (out / "ckpt").mkdir(exist_ok=True)

        def on_epoch(rec, net):
            if rec.epoch in keep:
                ckpt.save(ckpt.snapshot(net, epoch=rec.epoch), out / "ckpt" / f"epoch_{rec.epoch:04d}.ckpt")

        net = cfg.build_model(train.image_shape, train.num_classes)
        res = run_pipeline(train, test, cfg.train_spec(), seed=cfg.seed, net=net, on_epoch=on_epoch)
        log = res.full_log
        log.write_csv(out / "log.csv", net.depth_l)
        ckpt.save(ckpt.snapshot(res.net, epoch=len(log)), out / "model.ckpt")
        taus = log.column("tau")
        report.update(test_acc=res.test_acc, train_acc=log.records[-1].train_acc if len(log) else float("nan"),
                      epochs_trained=len(log), finetune_epochs=len(res.finetune_log or []),
                      rollbacks=log.rollbacks, max_tau=max(taus) if taus else 0,
                      final_acm=log.records[-1].acm if len(log) else float("nan"))
    except StagedTrainError as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
    report["wall_clock_s"] = round(time.perf_counter() - start, 3)
    _write_json(out / "report.json", report)
    return report


def cmd_generate(args) -> dict:
    cfg = _load_config(args)
    if cfg.perturbation["family"] is None:
        raise ConfigError("perturbation.family is required for generate")
    clean, _ = cfg.datasets()
    pset = cfg.perturbation_set(clean)
    out = _out_dir(args, "run")
    path = ul.save(pset, out / "perturbation.stpert")
    return {"file": str(path), **audit(pset)}


def cmd_train(args) -> dict:
    cfg = _load_config(args)
    out = _out_dir(args, "run")
    report = train_run(cfg, out)
    if report["error"]:
        raise _Recorded(report["error"], out / "report.json")
    return {"out": str(out), **{k: report[k] for k in ("test_acc", "epochs_trained", "rollbacks", "config_hash")}}


class _Recorded(StagedTrainError):
    """A failure that has already been written to a report file."""

    def __init__(self, message, where):
        super().__init__(f"{message} (see {where})")


def _sweep_cell(job):
    raw, out = job
    cfg = ExperimentConfig(raw)
    try:
        return train_run(cfg, Path(out))
    except Exception as exc:  # a cell failure must not stop the sweep
        return {"error": f"{type(exc).__name__}: {exc}", "config_hash": cfg.config_hash()}


def _threads() -> int:
    raw = os.environ.get("ST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ST_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ST_THREADS must be a positive integer, got {raw!r}")
    return n


def _parse_values(axis, values):
    out = []
    for v in values:
        if isinstance(v, str) and "/" in v:
            num, den = v.split("/")
            v = float(num) / float(den)
        elif isinstance(v, str):
            v = math.inf if v.strip().lower() in ("inf", "infinity") else float(v)
        out.append(float(v))
    return out


def cmd_sweep(args) -> dict:
    cfg = _load_config(args)
    axis = args.axis or cfg.sweep["axis"]
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = args.values.split(",") if args.values else cfg.sweep["values"]
    values = _parse_values(axis, values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    threads = _threads()
    out = _out_dir(args, "sweep")
    jobs = []
    for i, v in enumerate(values):
        raw = cfg.derive(**{SWEEP_PATHS[axis]: "inf" if math.isinf(v) else v}).to_dict()
        jobs.append((raw, str(out / f"{axis}_{i:02d}")))
    workers = min(threads, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_cell, jobs))
    else:
        reports = [_sweep_cell(j) for j in jobs]
    cols = ["axis", "value", "test_acc", "max_tau", "rollbacks", "final_acm", "epochs_trained", "config_hash",
            "error"]
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for v, rep in zip(values, reports):
            w.writerow([axis, repr(v), repr(float(rep.get("test_acc", float("nan")))), rep.get("max_tau", ""),
                        " ".join(str(e) for e in rep.get("rollbacks", [])), repr(float(rep.get("final_acm", float("nan")))),
                        rep.get("epochs_trained", ""), rep.get("config_hash", ""), rep.get("error") or ""])
    failed = sum(1 for r in reports if r.get("error"))
    return {"out": str(out / "sweep.csv"), "axis": axis, "rows": len(values), "failed": failed}


def _load_reference(cfg: ExperimentConfig, path, train):
    if not path:
        raise MissingReferenceCheckpoint("no reference checkpoint given (--reference or transplant.reference)")
    path = Path(path)
    if not path.is_file():
        raise MissingReferenceCheckpoint(f"reference checkpoint {path} does not exist")
    net = cfg.build_model(train.image_shape, train.num_classes)
    ckpt.restore(net, None, ckpt.load(path))
    return net


def cmd_transplant(args) -> dict:
    cfg = _load_config(args)
    train, _, test, pset = prepare_data(cfg)
    reference = _load_reference(cfg, args.reference or cfg.transplant["reference"], train)
    mode = args.mode or cfg.transplant["mode"]
    modes = ("shallow", "deep") if mode == "both" else (mode,)
    out = _out_dir(args, "transplant")
    start = time.perf_counter()
    res = transplant_experiment(reference, train, test, cfg.train_spec(), seed=cfg.seed,
                                count=cfg.transplant["count"], model_seed=cfg.seed + 1, modes=modes,
                                factory=lambda s: cfg.build_model(train.image_shape, train.num_classes, seed=s))
    for m in modes:
        getattr(res, f"{m}_log").write_csv(out / f"{m}_log.csv")
        ckpt.save(ckpt.snapshot(res.nets[m]), out / f"{m}.ckpt")
    report = {"config_hash": cfg.config_hash(), "modes": list(modes), "count": cfg.transplant["count"],
              "shallow_acc": res.shallow_acc, "deep_acc": res.deep_acc, "clean_acc": res.clean_acc,
              "wall_clock_s": round(time.perf_counter() - start, 3)}
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "report.json", report)
    return {"out": str(out), **{k: report[k] for k in ("shallow_acc", "deep_acc", "clean_acc")}}


def _parse_epochs(text):
    if not text:
        return []
    return [e if e == "final" else int(e) for e in (t.strip() for t in text.split(",")) if e]


def cmd_report(args) -> dict:
    run = Path(args.run_dir)
    log_path = run / "log.csv"
    if not log_path.is_file():
        raise MissingLogs(f"{run} has no log.csv")
    log = TrainLog.read_csv(log_path)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    with log_path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    keep = [i for i, h in enumerate(head) if h in ("epoch", "train_acc", "test_acc", "acm", "tau", "rollback")
            or h.startswith("gmv_")]
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow([row[i] for i in keep])
    dumps = []
    epochs = _parse_epochs(args.epochs)
    if epochs:
        cfg_path = run / "config.json"
        if not cfg_path.is_file():
            raise MissingLogs(f"{run} has no config.json needed for activation dumps")
        cfg = ExperimentConfig.load(cfg_path)
        pfile = run / "perturbation.stpert"
        train, _, _, _ = prepare_data(cfg, ul.load(pfile) if pfile.is_file() else None)
        subset = select_validation_subset(train, cfg.train_spec().validation_per_class, cfg.seed)
        net = cfg.build_model(train.image_shape, train.num_classes)
        (out / "activations").mkdir(exist_ok=True)
        for e in epochs:
            src = run / "model.ckpt" if e == "final" else run / "ckpt" / f"epoch_{e:04d}.ckpt"
            if not src.is_file():
                raise MissingLogs(f"no checkpoint for epoch {e} in {run}; list it in checkpoint_epochs")
            ckpt.restore(net, None, ckpt.load(src))
            name = "final" if e == "final" else f"epoch_{e:04d}"
            acts = penultimate_activations(net, subset.images)
            dumps.append(str(dump_activations(out / "activations" / f"{name}.act", acts, subset.labels,
                                              train.num_classes)))
    acm_col = log.column("acm")
    return {"summary": str(out / "summary.csv"), "rows": len(log), "dumps": dumps,
            "first_acm": acm_col[0] if acm_col else None, "final_acm": acm_col[-1] if acm_col else None}


def cmd_calibrate_gamma(args) -> dict:
    cfg = _load_config(args)
    clean, test = cfg.datasets()
    spec = cfg.train_spec()
    out = _out_dir(args, "calibration")
    gamma, log = calibrate_gamma(clean, test, spec, seed=cfg.seed, factor=args.factor)
    log.write_csv(out / "log.csv")
    peak = max(log.column("acm"))
    result = {"gamma": gamma, "peak_acm": peak, "factor": args.factor, "epochs": len(log),
              "config_hash": cfg.config_hash()}
    _write_json(out / "gamma.json", result)
    return {"out": str(out), **result}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "transplant": cmd_transplant,
    "report": cmd_report,
    "calibrate-gamma": cmd_calibrate_gamma,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stagedtrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name != "report":
            p.add_argument("--config", help="JSON experiment config")
            p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        if name == "sweep":
            p.add_argument("--axis", choices=SWEEP_AXES)
            p.add_argument("--values", help="comma separated, e.g. 0,0.5,1 or 1/5,1/4 or inf")
        if name == "transplant":
            p.add_argument("--mode", choices=("shallow", "deep", "both"))
            p.add_argument("--reference", help="STCKPT1 checkpoint of the clean-trained model")
        if name == "report":
            p.add_argument("run_dir")
            p.add_argument("--epochs", help="activation dumps, e.g. 1,5,final")
        if name == "calibrate-gamma":
            p.add_argument("--factor", type=float, default=1.5)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + " | ".join(COMMANDS))
        _emit(COMMANDS[args.command](args))
        return 0
    except ConfigError as exc:
        code, exc_ = 2, exc
    except (StagedTrainError, OSError, ValueError) as exc:
        code, exc_ = 1, exc
    print(f"error: {type(exc_).__name__}: {' '.join(str(exc_).split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
