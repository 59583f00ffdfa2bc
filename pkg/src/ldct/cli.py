"""Command-line entry point: ``ldct <command> --config cfg.json --out DIR``.

Every command resolves its JSON config against the defaults, writes the
result to ``resolved_config.json`` (which can be fed back through
``--config``), holds ``.lock`` in the output directory while it runs, and
finishes by writing ``checksums.json`` over its deterministic outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import statistics
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import data, experiments, metrics, pipeline, plotting, tomo, training
from . import denoiser as D
from .errors import ConfigError, DataError, LdctError

log = logging.getLogger("ldct")

COMMANDS = ("simulate", "pretrain", "finetune", "reconstruct", "evaluate", "ablate", "bench")
SNAPSHOT = "resolved_config.json"
CHECKSUMS = "checksums.json"
LOCK = ".lock"
# reference timings on the original hardware, reported next to ours
REFERENCE_SECONDS = {"fbp": 0.09375, "denoiser": 0.10938}


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, out, command, seed, config):
        self.out = Path(out)
        self.command = command
        self.seed = seed
        self.config = config
        self.volatile = set()  # files with wall-clock content, excluded from checksums

    def path(self, name, volatile=False):
        if volatile:
            self.volatile.add(name)
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, name, text, volatile=False):
        self.path(name, volatile).write_text(text)

    def write_json(self, name, obj, volatile=False):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n", volatile)

    def finish(self):
        sums = {}
        for p in sorted(self.out.rglob("*")):
            rel = p.relative_to(self.out).as_posix()
            if p.is_file() and rel not in (LOCK, CHECKSUMS) and rel not in self.volatile:
                sums[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
        self.write_json(CHECKSUMS, {"files": sums, "excluded": sorted(self.volatile)})


@contextmanager
def output_lock(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_config(path, command):
    """Read a JSON config; a resolved snapshot is unwrapped back to its config."""
    if path is None:
        return {}, None
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "command" in raw and "config" in raw:
        if raw["command"] != command:
            raise ConfigError(f"snapshot is for {raw['command']!r}, not {command!r}")
        return raw["config"], raw.get("seed")
    return raw, None


def _take(cfg, allowed, command):
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
    return {k: cfg.get(k, v) for k, v in allowed.items()}


def _abs(p):
    return None if p is None else str(Path(p).resolve())


def _wrap(fn, *args):
    """Turn stray type errors from dataclass construction into config errors."""
    try:
        return fn(*args)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# resolution: each returns the fully-populated config dict

def resolve_simulate(cfg, seed):
    c = _take(cfg, {"simulation": {}, "splits": [["train", 64], ["val", 16], ["test", 32]],
                    "write_sinograms": True}, "simulate")
    c["simulation"] = _wrap(pipeline.SimulationConfig.from_dict, c["simulation"]).to_dict()
    # an ordered list, since each split continues the sample stream of the previous one
    splits = c["splits"]
    if isinstance(splits, dict):
        splits = list(splits.items())
    try:
        splits = [[str(name), count] for name, count in splits]
    except (TypeError, ValueError):
        raise ConfigError("splits must be a list of [name, count] pairs") from None
    names = [n for n, _ in splits]
    if not splits or len(set(names)) != len(names) or any(
            not isinstance(n, int) or isinstance(n, bool) or n < 0 for _, n in splits):
        raise ConfigError("splits must be distinct names with non-negative counts")
    c["splits"] = splits
    c["write_sinograms"] = bool(c["write_sinograms"])
    return c


def resolve_pretrain(cfg, seed):
    c = _take(cfg, {"denoiser": {}, "train": {"alpha": 0.0, "epochs": 30}, "task": {}}, "pretrain")
    c["denoiser"] = _wrap(D.DenoiserConfig.from_dict, c["denoiser"]).to_dict()
    train = {"alpha": 0.0, "epochs": 30, **c["train"], "seed": seed}
    c["train"] = _wrap(training.TrainConfig.from_dict, train).to_dict()
    task = _wrap(training.GaussianPretrainTask.from_dict, c["task"])
    if task.manifest:
        task = training.GaussianPretrainTask(**{**task.to_dict(), "manifest": _abs(task.manifest)})
    c["task"] = task.to_dict()
    return c


def resolve_finetune(cfg, seed):
    c = _take(cfg, {"denoiser": {}, "train": {}, "init": "scratch", "checkpoint": None,
                    "train_data": None, "val_data": None, "compare_scratch": False}, "finetune")
    c["denoiser"] = _wrap(D.DenoiserConfig.from_dict, c["denoiser"]).to_dict()
    c["train"] = _wrap(training.TrainConfig.from_dict, {**c["train"], "seed": seed}).to_dict()
    if c["init"] not in ("scratch", "pretrained"):
        raise ConfigError("init must be 'scratch' or 'pretrained'")
    if c["init"] == "pretrained" and not c["checkpoint"]:
        raise ConfigError("pretrained init needs a checkpoint path")
    if not c["train_data"] or not c["val_data"]:
        raise ConfigError("train_data and val_data manifests are required")
    for k in ("checkpoint", "train_data", "val_data"):
        c[k] = _abs(c[k])
    c["compare_scratch"] = bool(c["compare_scratch"])
    return c


def resolve_evaluate(cfg, seed=None):
    c = _take(cfg, {"checkpoint": None, "data": None, "filter": None, "fixed_range": 1.0}, "evaluate")
    if not c["data"]:
        raise ConfigError("data manifest is required")
    c["checkpoint"], c["data"] = _abs(c["checkpoint"]), _abs(c["data"])
    if c["filter"] is not None:
        c["filter"] = tomo.FilterKind.parse(c["filter"]).value
    if not float(c["fixed_range"]) > 0:
        raise ConfigError("fixed_range must be positive")
    c["fixed_range"] = float(c["fixed_range"])
    return c


def resolve_reconstruct(cfg, seed=None):
    c = _take(cfg, {"checkpoint": None, "data": None, "filter": None, "ids": None, "count": 1,
                    "fixed_range": 1.0}, "reconstruct")
    c = {**resolve_evaluate({k: c[k] for k in ("checkpoint", "data", "filter", "fixed_range")}),
         "ids": c["ids"], "count": c["count"]}
    if c["ids"] is None and (not isinstance(c["count"], int) or c["count"] < 1):
        raise ConfigError("count must be a positive integer")
    return c


def resolve_ablate(cfg, seed):
    c = dict(cfg)
    name = c.pop("ablation", None)
    if name not in experiments.ABLATIONS:
        raise ConfigError(f"ablation must be one of {experiments.ABLATIONS}, got {name!r}")
    exp = experiments.ExperimentConfig.from_dict({**c, "data_seed": seed})
    d = exp.to_dict()
    d["pretrained_checkpoint"] = _abs(d["pretrained_checkpoint"])
    return {"ablation": name, **d}


def resolve_bench(cfg, seed=None):
    c = _take(cfg, {"checkpoint": None, "simulation": {}, "repetitions": 5, "warmup": 1,
                    "filter": "ramlak"}, "bench")
    if not c["checkpoint"]:
        raise ConfigError("bench needs a trained checkpoint")
    c["checkpoint"] = _abs(c["checkpoint"])
    c["simulation"] = _wrap(pipeline.SimulationConfig.from_dict, c["simulation"]).to_dict()
    if not isinstance(c["repetitions"], int) or c["repetitions"] < 5:
        raise ConfigError("bench needs at least 5 repetitions")
    if not isinstance(c["warmup"], int) or c["warmup"] < 0:
        raise ConfigError("warmup must be a non-negative integer")
    c["filter"] = tomo.FilterKind.parse(c["filter"]).value
    return c


# commands

def cmd_simulate(run: Run):
    c = run.config
    sim = pipeline.SimulationConfig.from_dict(c["simulation"])
    start = 0
    summary = {}
    for name, count in c["splits"]:
        s = pipeline.simulate(sim, count, run.seed, start)
        start += count
        inputs = s.inputs(sim.filter)
        ids = [f"{name}{i:05d}" for i in range(count)]
        sino_files = None
        if c["write_sinograms"]:
            sino_files = []
            for pid, sino in zip(ids, s.sinograms):
                rel = f"sinograms/{pid}.f32"
                tomo.write_sinogram(sino, run.out / name / rel)
                sino_files.append(rel)
        data.write_dataset(zip(s.gts, inputs), run.out / name, ids=ids, sinogram_files=sino_files)
        summary[name] = count
    run.write_json("summary.json", {"splits": summary, "geometry": sim.geometry().to_dict()})


def cmd_pretrain(run: Run):
    c = run.config
    cfg = training.TrainConfig.from_dict(c["train"])
    task = training.GaussianPretrainTask.from_dict(c["task"])
    model, history = training.pretrain_gaussian(cfg, task, D.DenoiserConfig.from_dict(c["denoiser"]),
                                                D.Scratch(run.seed))
    D.save_checkpoint(model, run.path("pretrained.ckpt"))
    _write_history(run, "history", history)
    plotting.training_curves({"pretraining": history}, run.path("curves.png"))


def _write_history(run, stem, history):
    run.write_text(f"{stem}.csv", history.to_csv(with_time=False))
    run.write_text(f"{stem}_timing.csv", history.to_csv(with_time=True), volatile=True)
    run.write_json(f"{stem}_summary.json", {"baseline": history.baseline, "best_epoch": history.best_epoch})


def cmd_finetune(run: Run):
    c = run.config
    dcfg = D.DenoiserConfig.from_dict(c["denoiser"])
    cfg = training.TrainConfig.from_dict(c["train"])
    train = data.DatasetManifest.load(c["train_data"])
    val = data.DatasetManifest.load(c["val_data"])
    init = D.Pretrained(c["checkpoint"]) if c["init"] == "pretrained" else D.Scratch(run.seed)
    model, history = training.finetune(cfg, init, train, val, dcfg)
    D.save_checkpoint(model, run.path("model.ckpt"))
    _write_history(run, "history", history)
    curves = {c["init"]: history}
    if c["compare_scratch"] and c["init"] == "pretrained":
        scratch, h_scratch = training.finetune(cfg, D.Scratch(run.seed), train, val, dcfg)
        D.save_checkpoint(scratch, run.path("model_scratch.ckpt"))
        _write_history(run, "history_scratch", h_scratch)
        curves["scratch"] = h_scratch
        run.write_json("comparison.json", {
            "ssim_dominance": experiments.curve_dominance(history, h_scratch, "ssim"),
            "psnr_dominance": experiments.curve_dominance(history, h_scratch, "psnr"),
        })
    plotting.training_curves(curves, run.path("curves.png"))


def _load_model(path):
    return D.identity_model() if path is None else D.load_checkpoint(path)


def _eval_inputs(c):
    kind = None if c["filter"] is None else tomo.FilterKind.parse(c["filter"])
    manifest, inputs, gts = pipeline.load_inputs(c["data"], kind)
    if len(gts) == 0:
        raise DataError("dataset has no entries")
    return manifest, inputs, gts


def cmd_evaluate(run: Run):
    c = run.config
    model = _load_model(c["checkpoint"])
    manifest, inputs, gts = _eval_inputs(c)
    report = pipeline.evaluate_arrays(model, inputs, gts, manifest.ids, c["fixed_range"])
    fbp = pipeline.evaluate_arrays(None, inputs, gts, manifest.ids, c["fixed_range"])
    run.write_text("metrics.csv", report.to_csv())
    run.write_text("metrics_fbp.csv", fbp.to_csv())
    run.write_text("metrics.txt", fbp.to_table("FBP") + "\n" + report.to_table("FBP + denoiser"))
    run.write_json("aggregates.json", {"model": _json_aggs(report), "fbp": _json_aggs(fbp),
                                       "range_policy": report.range_policy})
    plotting.metrics_bars({"FBP": fbp, "FBP + denoiser": report}, run.path("metrics.png"))


def _json_num(x):
    if isinstance(x, float) and (np.isinf(x) or np.isnan(x)):
        return str(x)
    return x


def _json_aggs(report):
    return {k: [_json_num(m), _json_num(s)] for k, (m, s) in report.aggregates().items()}


def cmd_reconstruct(run: Run):
    c = run.config
    model = _load_model(c["checkpoint"])
    manifest, inputs, gts = _eval_inputs(c)
    ids = manifest.ids
    wanted = c["ids"] if c["ids"] is not None else ids[: c["count"]]
    missing = [i for i in wanted if i not in ids]
    if missing:
        raise DataError(f"ids not in dataset: {missing}")
    for pid in wanted:
        k = ids.index(pid)
        out = D.forward(model, inputs[k])
        caps = {"ground_truth": {"psnr": None, "ssim": None}}
        for key, img in (("fbp", inputs[k]), ("output", out)):
            row = metrics.image_metrics(pid, img, gts[k], c["fixed_range"])
            caps[key] = {"psnr": _json_num(row.psnr), "ssim": row.ssim,
                         "psnr_fr": _json_num(row.psnr_fr), "ssim_fr": row.ssim_fr}
        plotting.save_png(inputs[k], run.path(f"{pid}_fbp.png"))
        plotting.save_png(out, run.path(f"{pid}_output.png"))
        plotting.save_png(gts[k], run.path(f"{pid}_gt.png"))
        run.write_json(f"{pid}_captions.json", caps)
        panel_caps = {k2: {**v, "psnr": float(v["psnr"]) if v["psnr"] is not None else None}
                      for k2, v in caps.items()}
        plotting.reconstruction_panel(inputs[k], out, gts[k], panel_caps, run.path(f"{pid}_panel.png"))


def cmd_ablate(run: Run):
    c = dict(run.config)
    name = c.pop("ablation")
    exp = experiments.ExperimentConfig.from_dict(c)
    lab = experiments.Lab(exp, run.out)
    table = experiments.ablate(lab, name)
    run.write_text(f"{name}.csv", table.to_csv())
    run.write_text(f"{name}_summary.csv", table.summary_csv())
    fbp = lab.fbp_report()
    run.write_text(f"{name}.txt", table.to_table() + "\n" + fbp.to_table("FBP only (Ram-Lak)"))
    cols = ("psnr", "ssim", "equivariance_defect") if name == "rotation" else ("psnr", "ssim")
    plotting.ablation_bars(table, run.path(f"{name}.png"), cols)
    if name == "init":
        seed = exp.seeds[0]
        pre, scr = lab.run(seed, init="pretrained"), lab.run(seed, init="scratch")
        plotting.training_curves({"pretrained": pre.history, "scratch": scr.history},
                                 run.path("init_curves.png"))


def cmd_bench(run: Run):
    c = run.config
    sim = pipeline.SimulationConfig.from_dict(c["simulation"])
    model = D.load_checkpoint(c["checkpoint"])
    kind = tomo.FilterKind.parse(c["filter"])
    _, _, sino = pipeline.simulate_sample(sim, run.seed, 0)
    stages = {"fbp": [], "denoiser": [], "total": []}
    for rep in range(c["warmup"] + c["repetitions"]):
        t0 = time.perf_counter()
        img = tomo.fbp(sino, kind).astype(np.float32)
        t1 = time.perf_counter()
        D.forward(model, img)
        t2 = time.perf_counter()
        if rep >= c["warmup"]:
            stages["fbp"].append(t1 - t0)
            stages["denoiser"].append(t2 - t1)
            stages["total"].append(t2 - t0)
    report = timing_report(stages)
    report["image_size"] = sim.size
    run.write_json("timing.json", report, volatile=True)
    lines = ["stage,median_s,min_s,max_s,stdev_s"]
    for name in ("fbp", "denoiser", "total"):
        s = report["stages"][name]
        lines.append(f"{name},{s['median']!r},{s['min']!r},{s['max']!r},{s['stdev']!r}")
    run.write_text("timing.csv", "\n".join(lines) + "\n", volatile=True)


def timing_report(stages):
    out = {}
    for name, xs in stages.items():
        out[name] = {"median": statistics.median(xs), "min": min(xs), "max": max(xs),
                     "stdev": statistics.stdev(xs) if len(xs) > 1 else 0.0, "samples": xs}
    return {
        "stages": out,
        "fbp_seconds": out["fbp"]["median"],
        "denoiser_seconds": out["denoiser"]["median"],
        "total_seconds": out["total"]["median"],
        "repetitions": len(stages["total"]),
        "hardware": f"{platform.machine()} {platform.processor() or ''} {platform.system()}; "
                    f"torch threads {torch.get_num_threads()}".strip(),
        "reference_seconds": REFERENCE_SECONDS,
    }


RESOLVERS = {
    "simulate": resolve_simulate, "pretrain": resolve_pretrain, "finetune": resolve_finetune,
    "evaluate": resolve_evaluate, "reconstruct": resolve_reconstruct, "ablate": resolve_ablate,
    "bench": resolve_bench,
}
HANDLERS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "evaluate": cmd_evaluate, "reconstruct": cmd_reconstruct, "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ldct", description="Low-dose CT: FBP followed by a learned denoiser.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config, or a resolved_config.json snapshot")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="base seed (default: snapshot seed or 0)")
        p.add_argument("--workers", type=int, default=1, help="cap on worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_command(command, config_path, out, seed=None, workers=1):
    raw, snap_seed = load_config(config_path, command)
    seed = seed if seed is not None else (snap_seed if snap_seed is not None else 0)
    if workers < 1:
        raise ConfigError("--workers must be >= 1")
    resolved = RESOLVERS[command](raw, seed)
    with output_lock(out):
        torch.set_num_threads(workers)
        run = Run(out, command, seed, resolved)
        run.write_json(SNAPSHOT, {"command": command, "seed": seed, "config": resolved})
        HANDLERS[command](run)
        run.finish()
    return run


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_command(args.command, args.config, args.out, args.seed, args.workers)
    except LdctError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
