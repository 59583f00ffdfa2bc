"""Desk-scale experiment harness: shared simulated splits, one pretraining run,
memoized fine-tuning runs, and the ablation tables built from them."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import denoiser as D
from . import pipeline, training
from .errors import ConfigError
from .metrics import METRIC_NAMES, format_mean_std
from .tomo import FilterKind

log = logging.getLogger(__name__)

ABLATIONS = ("filter", "alpha", "noise_aug", "rotation", "init")
ALPHA_SWEEP = (0.0, 1.0, 3.0, 5.0, 7.0, 10.0)
NOISE_SCENARIOS = {
    "i": (0.0,),
    "ii": (0.0, 0.01),
    "iii": (0.0, 0.005, 0.01),
}


@dataclass(frozen=True)
class ExperimentConfig:
    simulation: pipeline.SimulationConfig = field(default_factory=pipeline.SimulationConfig)
    denoiser: D.DenoiserConfig = field(default_factory=D.DenoiserConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    pretrain: training.TrainConfig = field(default_factory=lambda: training.TrainConfig(alpha=0.0, epochs=30))
    pretrain_task: training.GaussianPretrainTask = field(default_factory=training.GaussianPretrainTask)
    n_train: int = 64
    n_val: int = 16
    n_test: int = 32
    data_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    init: str = "pretrained"  # or "scratch"
    pretrained_checkpoint: str | None = None  # skip pretraining and use this file

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.init not in ("pretrained", "scratch"):
            raise ConfigError(f"init must be 'pretrained' or 'scratch', not {self.init!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self):
        return {
            "simulation": self.simulation.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "train": self.train.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "pretrain_task": self.pretrain_task.to_dict(),
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "data_seed": self.data_seed, "seeds": list(self.seeds), "init": self.init,
            "pretrained_checkpoint": self.pretrained_checkpoint,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        nested = {
            "simulation": pipeline.SimulationConfig, "denoiser": D.DenoiserConfig,
            "train": training.TrainConfig, "pretrain": training.TrainConfig,
            "pretrain_task": training.GaussianPretrainTask,
        }
        for key, typ in nested.items():
            if key in d:
                d[key] = typ.from_dict(d[key])
        if "pretrain" not in d:
            d["pretrain"] = training.TrainConfig(alpha=0.0, epochs=30)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RunResult:
    key: tuple
    model: D.Denoiser
    history: training.TrainHistory
    report: object  # MetricsReport on the test split
    seconds: float = 0.0  # wall time of training plus test evaluation
    _defect: float | None = None

    def metric(self, name):
        return self.report.mean(name)


class Lab:
    """Memoizes simulated data, the pretrained model and every fine-tuning run."""

    def __init__(self, config: ExperimentConfig, work_dir=None):
        self.config = config
        self.work_dir = Path(work_dir) if work_dir else None
        self._splits = None
        self._inputs = {}
        self._pretrained_path = None
        self.pretrain_history = None
        self.pretrain_seconds = 0.0
        self._runs = {}

    # data
    def splits(self):
        if self._splits is None:
            c = self.config
            sim, seed = c.simulation, c.data_seed
            self._splits = {
                "train": pipeline.simulate(sim, c.n_train, seed, 0),
                "val": pipeline.simulate(sim, c.n_val, seed, c.n_train),
                "test": pipeline.simulate(sim, c.n_test, seed, c.n_train + c.n_val),
            }
        return self._splits

    def inputs(self, split, kind):
        kind = FilterKind.parse(kind)
        key = (split, kind)
        if key not in self._inputs:
            self._inputs[key] = self.splits()[split].inputs(kind)
        return self._inputs[key]

    def fbp_report(self, kind=FilterKind.RAMLAK):
        test = self.splits()["test"]
        return pipeline.evaluate_arrays(None, self.inputs("test", kind), test.gts)

    # pretraining
    def pretrained_path(self):
        if self.config.pretrained_checkpoint:
            return self.config.pretrained_checkpoint
        if self._pretrained_path is None:
            if self.work_dir is None:
                raise ConfigError("a work directory is needed to hold the pretrained checkpoint")
            t0 = time.perf_counter()
            model, self.pretrain_history = training.pretrain_gaussian(
                self.config.pretrain, self.config.pretrain_task, self.config.denoiser)
            self.pretrain_seconds = time.perf_counter() - t0
            path = self.work_dir / "pretrained.ckpt"
            D.save_checkpoint(model, path)
            self._pretrained_path = str(path)
        return self._pretrained_path

    # fine-tuning
    def run(self, seed, init=None, filter="ramlak", **train_overrides):
        """Fine-tune with the base training config plus overrides; memoized."""
        init = init or self.config.init
        kind = FilterKind.parse(filter)
        cfg = replace(self.config.train, seed=seed, **train_overrides)
        key = (init, kind.value, json.dumps(cfg.to_dict(), sort_keys=True))
        if key in self._runs:
            return self._runs[key]
        mode = D.Pretrained(self.pretrained_path()) if init == "pretrained" else D.Scratch(seed)
        splits = self.splits()
        t0 = time.perf_counter()
        log.info("fine-tune init=%s filter=%s seed=%d overrides=%s", init, kind.value, seed, train_overrides)
        model, history = training.finetune(
            cfg, mode,
            (self.inputs("train", kind), splits["train"].gts),
            (self.inputs("val", kind), splits["val"].gts),
            self.config.denoiser,
        )
        report = pipeline.evaluate_arrays(model, self.inputs("test", kind), splits["test"].gts)
        result = RunResult(key, model, history, report, time.perf_counter() - t0)
        self._runs[key] = result
        return result

    def defect(self, result: RunResult, kind=FilterKind.RAMLAK):
        if result._defect is None:
            result._defect = pipeline.equivariance_defect(result.model, self.inputs("test", kind))
        return result._defect


@dataclass
class AblationTable:
    name: str
    rows: list = field(default_factory=list)  # dicts: variant, seed, metrics...
    columns: tuple = METRIC_NAMES

    def variants(self):
        seen = []
        for r in self.rows:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def values(self, variant, column):
        return [r[column] for r in self.rows if r["variant"] == variant]

    def summary(self):
        """{variant: {column: (mean, population std)}} over seeds."""
        out = {}
        for v in self.variants():
            out[v] = {}
            for c in self.columns:
                a = np.asarray(self.values(v, c), dtype=np.float64)
                out[v][c] = (float(a.mean()), float(a.std()))
        return out

    def wins(self, a, b, column, ties=False):
        """Seeds where variant ``a`` beats ``b`` on ``column``."""
        va = {r["seed"]: r[column] for r in self.rows if r["variant"] == a}
        vb = {r["seed"]: r[column] for r in self.rows if r["variant"] == b}
        return sum(1 for s in va if s in vb and (va[s] >= vb[s] if ties else va[s] > vb[s]))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", *self.columns])
        for r in self.rows:
            w.writerow([r["variant"], r["seed"], *(repr(float(r[c])) for c in self.columns)])
        return buf.getvalue()

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "n", *(f"{c}_{s}" for c in self.columns for s in ("mean", "std"))])
        for v, stats in self.summary().items():
            w.writerow([v, len(self.values(v, self.columns[0])),
                        *(repr(x) for c in self.columns for x in stats[c])])
        return buf.getvalue()

    def to_table(self):
        stats = self.summary()
        width = max([len(v) for v in stats] + [7])
        head = f"{'variant':{width}s}  " + "  ".join(f"{c.upper().replace('_', '-'):>19s}" for c in self.columns)
        lines = [f"{self.name} ablation", head, "-" * len(head)]
        for v, s in stats.items():
            lines.append(f"{v:{width}s}  " + "  ".join(f"{format_mean_std(*s[c]):>19s}" for c in self.columns))
        return "\n".join(lines) + "\n"


def _row(variant, seed, result: RunResult, extra=None):
    row = {"variant": variant, "seed": seed}
    for name in METRIC_NAMES:
        row[name] = result.metric(name)
    row.update(extra or {})
    return row


def ablate(lab: Lab, name, seeds=None):
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    seeds = seeds if seeds is not None else lab.config.seeds
    table = AblationTable(name)
    if name == "filter":
        for seed in seeds:
            for kind in (FilterKind.RAMLAK, FilterKind.HANN):
                table.rows.append(_row(kind.value, seed, lab.run(seed, filter=kind)))
    elif name == "alpha":
        for seed in seeds:
            for a in ALPHA_SWEEP:
                table.rows.append(_row(f"alpha={a:g}", seed, lab.run(seed, alpha=a)))
    elif name == "noise_aug":
        for seed in seeds:
            for label, sigmas in NOISE_SCENARIOS.items():
                table.rows.append(_row(label, seed, lab.run(seed, noise_aug_sigmas=sigmas)))
    elif name == "rotation":
        table.columns = METRIC_NAMES + ("equivariance_defect",)
        for seed in seeds:
            for label, flag in (("rotations", True), ("no_rotations", False)):
                result = lab.run(seed, rotations_enabled=flag)
                table.rows.append(_row(label, seed, result, {"equivariance_defect": lab.defect(result)}))
    elif name == "init":
        table.columns = METRIC_NAMES + ("best_val_ssim",)
        for seed in seeds:
            for init in ("pretrained", "scratch"):
                result = lab.run(seed, init=init)
                best = max(result.history.column("ssim"), default=math.nan)
                table.rows.append(_row(init, seed, result, {"best_val_ssim": best}))
    return table


def curve_dominance(a: training.TrainHistory, b: training.TrainHistory, column="ssim"):
    """Fraction of epochs in which ``a``'s validation curve is at least ``b``'s."""
    xa, xb = a.column(column), b.column(column)
    n = min(len(xa), len(xb))
    if n == 0:
        return math.nan
    return sum(1 for i in range(n) if xa[i] >= xb[i]) / n

