"""``probe`` command-line front end.

    probe <command> --config FILE [--seed N] [--out DIR] [--override key=value ...] [--resume]

Every invocation appends one JSON run record to ``<out>/runs.jsonl`` holding
the fully resolved config, its hash, timestamps and the emitted metrics.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import netcore as nc
from .data import Dataset, load_cifar10, normalize, synth_dataset, synth_images

log = logging.getLogger("landprobe.cli")

COMMANDS = ("local-minima", "norm-bias", "ntk-sweep", "rank", "attack")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# --------------------------------------------------------------------------
# config schema: defaults double as type declarations
# --------------------------------------------------------------------------

DATASET = {
    "kind": "synthetic",  # synthetic | synthetic_images | cifar10
    "classes": 3,
    "dim": 2,
    "per_class": 200,
    "separation": 4.0,
    "clusters": 1,
    "noise": 1.0,
    "shape": None,
    "seed": 0,
    "path": None,
    "subset": None,
    "normalize": "none",
}

MODEL = {"family": "mlp", "widths": None, "width": 16, "bn": True, "skip": True, "blocks": 4}

TRAIN = {"epochs": 10, "lr": 0.05, "schedule": "constant", "batch_size": 128, "momentum": 0.9, "augment": False}

ATTACK = {"epsilon": 8 / 255, "step_size": 2 / 255, "steps": 7, "random_start": False}

DEFAULTS = {
    "local-minima": {
        "dataset": DATASET,
        "inits": ["lemma1", "default"],
        "trap": {
            "widths": None, "optimizer": "gd", "lr": 0.05, "schedule": "constant", "epochs": 500,
            "batch_size": 128, "momentum": 0.9, "shift": 20.0, "half_width": 50.0, "linear_weight_decay": 1e-4,
            "linear_max_iter": 20000, "power_iters": 500, "measure": True, "lr_by_init": {},
        },
    },
    "norm-bias": {
        "dataset": DATASET,
        "model": MODEL,
        "train": TRAIN,
        "weight_decay": 5e-4,
        "norm_bias": {"coefficient": 5e-4, "mu_sq": None, "slack": 1.1},
    },
    "ntk-sweep": {
        "dataset": DATASET,
        "family": "mlp2",
        "widths": [16, 64, 256],
        "seeds": [0, 1, 2],
        "n_images": 25,
        "image_seed": 0,
        "bn": True,
        "skip": True,
        "train": {"epochs": 10, "lr": 0.01, "schedule": "constant", "batch_size": 64, "momentum": 0.9,
                  "weight_decay": 5e-4},
    },
    "rank": {
        "dataset": DATASET,
        "model": MODEL,
        "pretrain": TRAIN,
        "modes": ["none", "RankMin", "RankMax"],
        "finetune": {"epochs": 15, "schedule": "finetune", "lr": None, "clip_epochs": 6, "quantile": 0.5,
                     "batch_size": 128, "momentum": 0.9, "adversarial": False},
        "attack": ATTACK,
    },
    "attack": {
        "dataset": DATASET,
        "model": MODEL,
        "train": TRAIN,
        "adversarial": False,
        "train_attack": dict(ATTACK, random_start=True),
        "attack": ATTACK,
    },
}

CHOICES = {
    "dataset.kind": ("synthetic", "synthetic_images", "cifar10"),
    "dataset.normalize": ("none", "standardize"),
    "model.family": ("mlp", "mlp2", "mlp4", "convnet6", "residual"),
    "family": ("mlp2", "mlp4", "convnet6", "residual"),
    "trap.optimizer": ("gd", "sgd", "sgd_momentum"),
}


def _merge(defaults: dict, given: dict, prefix: str, errors: list) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            errors.append(f"{path}: unknown key")
            continue
        d = defaults[key]
        if isinstance(d, dict) and d and isinstance(value, dict):
            out[key] = _merge(d, value, path + ".", errors)
        elif d is None or isinstance(d, dict):
            out[key] = value
        elif isinstance(d, bool):
            if not isinstance(value, bool):
                errors.append(f"{path}: expected true/false, got {value!r}")
            out[key] = value
        elif isinstance(d, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{path}: expected a number, got {value!r}")
            elif isinstance(d, int):
                if float(value).is_integer():
                    value = int(value)
                else:
                    errors.append(f"{path}: expected an integer, got {value!r}")
            out[key] = value
        elif isinstance(d, str):
            if key == "schedule" and isinstance(value, dict):
                out[key] = value
            elif not isinstance(value, str):
                errors.append(f"{path}: expected a string, got {value!r}")
            out[key] = value
        elif isinstance(d, list):
            if not isinstance(value, list):
                errors.append(f"{path}: expected a list, got {value!r}")
            out[key] = value
    return out


def _lookup(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def validate(command: str, raw: dict) -> dict:
    """Merge ``raw`` over the command defaults; every problem is reported at once."""
    if command not in COMMANDS:
        raise ConfigError([f"command: unknown {command!r}; expected one of {COMMANDS}"])
    errors: list = []
    raw = dict(raw)
    raw.pop("command", None)
    seed = raw.pop("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors.append(f"seed: expected a non-negative integer, got {seed!r}")
    cfg = _merge(DEFAULTS[command], raw, "", errors)
    cfg["seed"] = seed
    for key, allowed in CHOICES.items():
        value = _lookup(cfg, key)
        if value is not None and value not in allowed and _lookup(DEFAULTS[command], key) is not None:
            errors.append(f"{key}: {value!r} not one of {allowed}")
    ds = cfg["dataset"]
    if ds["kind"] == "cifar10":
        root = ds["path"] or os.environ.get("PROBE_DATA_DIR")
        if not root or not Path(root).is_dir():
            errors.append(f"dataset.path: CIFAR-10 directory {root!r} does not exist (set it or PROBE_DATA_DIR)")
    elif isinstance(ds["classes"], int) and ds["classes"] < 2:
        errors.append("dataset.classes: need at least 2")
    for key in ("per_class", "dim"):
        if isinstance(ds[key], (int, float)) and ds[key] < 1:
            errors.append(f"dataset.{key}: must be >= 1")
    for section in ("train", "pretrain"):
        if section in cfg:
            t = cfg[section]
            if isinstance(t["lr"], (int, float)) and t["lr"] <= 0:
                errors.append(f"{section}.lr: must be > 0")
            if isinstance(t["epochs"], (int, float)) and t["epochs"] < 0:
                errors.append(f"{section}.epochs: must be >= 0")
            if isinstance(t["batch_size"], (int, float)) and t["batch_size"] < 1:
                errors.append(f"{section}.batch_size: must be >= 1")
    if command == "local-minima":
        from .landscape import INIT_SCHEMES

        for init in cfg["inits"] if isinstance(cfg["inits"], list) else []:
            if init not in INIT_SCHEMES:
                errors.append(f"inits: {init!r} not one of {INIT_SCHEMES}")
    if command == "ntk-sweep" and isinstance(cfg["widths"], list):
        if not cfg["widths"] or cfg["widths"] != sorted(cfg["widths"]):
            errors.append("widths: must be a non-empty ascending list")
    if command == "rank" and isinstance(cfg["modes"], list):
        for m in cfg["modes"]:
            if m not in ("none", "RankMin", "RankMax"):
                errors.append(f"modes: {m!r} not one of ('none', 'RankMin', 'RankMax')")
    if errors:
        raise ConfigError(errors)
    return cfg


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r}: {part} is not a section"])
        node[parts[-1]] = _parse_value(value)
    return raw


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def append_record(path: Path, record: dict) -> None:
    """Append one JSON line with a single O_APPEND write."""
    line = (json.dumps(_jsonable(record), sort_keys=True) + "\n").encode()
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def read_records(path: Path) -> list[dict]:
    if not Path(path).exists():
        return []
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_csv(path: Path, rows, columns) -> str:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(_jsonable(r))
    os.replace(tmp, path)
    return str(path)


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def build_dataset(ds: dict) -> Dataset:
    if ds["kind"] == "cifar10":
        data = load_cifar10(ds["path"], ds["subset"])
    elif ds["kind"] == "synthetic_images":
        shape = tuple(ds["shape"] or (3, 8, 8))
        data = synth_images(ds["classes"], shape, ds["per_class"], ds["noise"], ds["seed"])
    else:
        data = synth_dataset(ds["classes"], ds["dim"], ds["per_class"], ds["separation"], ds["seed"],
                             ds["clusters"], ds["noise"], tuple(ds["shape"]) if ds["shape"] else None)
    return normalize(data, ds["normalize"])


def build_model(model: dict, data: Dataset) -> nc.NetworkSpec:
    from .ntkprobe import build_family

    if model["family"] == "mlp":
        d = int(np.prod(data.input_shape))
        hidden = model["widths"] or [model["width"]] * 3
        spec = nc.NetworkSpec.mlp([d] + list(hidden) + [data.num_classes])
        if len(data.input_shape) > 1:
            spec = nc.NetworkSpec((nc.Flatten(),) + spec.layers, data.input_shape, data.num_classes)
        return spec
    return build_family(model["family"], model["width"], data.input_shape, data.num_classes, model["bn"],
                        model["skip"], model["blocks"])


def _train_cfg(t: dict, seed: int, reg=None, attack=None):
    from .regtrain import RegularizerSpec, TrainConfig

    return TrainConfig(t["epochs"], t["lr"], t["schedule"], t["batch_size"], t["momentum"],
                       reg or RegularizerSpec(), t.get("augment", False), attack, seed)


def _attack_cfg(a: dict):
    from .regtrain import AttackConfig

    return AttackConfig(a["epsilon"], a["step_size"], a["steps"], a["random_start"])


TRAIN_TRACE = ("epoch", "lr", "loss", "clean_acc", "robust_acc", "param_norm")


def _trace_rows(trace):
    return [dict(zip(TRAIN_TRACE, row)) for row in trace]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_local_minima(cfg, out: Path, ctx) -> dict:
    from .landscape import TrapConfig, trapping_experiment

    data = build_dataset(cfg["dataset"])
    if len(data.input_shape) != 1:
        def flat(b):
            return nc.Batch(b.inputs.reshape(len(b), -1), b.labels, b.num_classes)

        data = Dataset(flat(data.train), flat(data.test), data.num_classes, data.meta)
    t = dict(cfg["trap"])
    lr_by_init = t.pop("lr_by_init")
    d = data.train.inputs.shape[1]
    widths = t.pop("widths") or [d, 512, 512, 512, data.num_classes]
    rows, metrics = [], {"widths": widths}
    for init in cfg["inits"]:
        lr = lr_by_init.get(init, t["lr"])
        tc = TrapConfig(widths=widths, init=init, seed=cfg["seed"], **dict(t, lr=lr))
        res = trapping_experiment(tc, data.train)
        rec = res.record()
        for phase in ("before", "after"):
            if rec[phase]:
                r = dict(rec[phase], init=init, phase=phase, linear_loss=res.linear_loss, trapped=res.trapped,
                         positive_throughout=res.positive_throughout)
                for key in ("min_ev", "max_ev"):
                    r[key + "_converged"] = r[key]["converged"]
                    r[key] = r[key]["eigenvalue"]
                rows.append(r)
        ctx["artifacts"].append(write_csv(out / f"trace_{init}.csv",
                                          [dict(zip(("epoch", "loss", "grad_norm"), r)) for r in res.trace],
                                          ("epoch", "loss", "grad_norm")))
        metrics[init] = {k: rec[k] for k in ("initial_loss", "final_loss", "linear_loss", "trapped",
                                             "positive_throughout", "before", "after")}
    cols = ("init", "phase", "loss", "grad_norm", "min_ev", "min_ev_converged", "max_ev", "max_ev_converged",
            "min_activation", "linear_loss", "trapped", "positive_throughout")
    ctx["artifacts"].append(write_csv(out / "stationarity.csv", rows, cols))
    return metrics


def cmd_norm_bias(cfg, out: Path, ctx) -> dict:
    from .regtrain import RegularizerSpec, accuracy, mu_heuristic, train

    data = build_dataset(cfg["dataset"])
    spec = build_model(cfg["model"], data)
    init = nc.init(spec, "he_uniform", cfg["seed"])
    runs = {}
    stats = nc.init_stats(spec)
    wd_params, wd_trace = train(spec, init.copy(), data.train,
                                _train_cfg(cfg["train"], cfg["seed"], RegularizerSpec.weight_decay(cfg["weight_decay"])),
                                stats, data.test)
    runs["weight_decay"] = (wd_params, wd_trace, stats, cfg["weight_decay"], 0.0)
    nb = cfg["norm_bias"]
    mu_sq = nb["mu_sq"] if nb["mu_sq"] is not None else mu_heuristic(wd_params, nb["slack"])
    stats_nb = nc.init_stats(spec)
    nb_params, nb_trace = train(spec, init.copy(), data.train,
                                _train_cfg(cfg["train"], cfg["seed"], RegularizerSpec.norm_bias(nb["coefficient"], mu_sq)),
                                stats_nb, data.test)
    runs["norm_bias"] = (nb_params, nb_trace, stats_nb, nb["coefficient"], mu_sq)
    rows, metrics = [], {}
    for name, (p, trace, st, coef, mu) in runs.items():
        ctx["artifacts"].append(write_csv(out / f"trace_{name}.csv", _trace_rows(trace), TRAIN_TRACE))
        p.save(out / f"params_{name}.bin")
        row = {"regularizer": name, "coefficient": coef, "mu_sq": mu, "final_norm_sq": p.norm() ** 2,
               "train_loss": trace[-1][2] if trace else float("nan"),
               "clean_acc": accuracy(spec, p, data.test, st)}
        rows.append(row)
        metrics[name] = row
    ctx["artifacts"].append(write_csv(out / "norm_bias.csv", rows, list(rows[0])))
    return metrics


def cmd_ntk_sweep(cfg, out: Path, ctx) -> dict:
    from .ntkprobe import SWEEP_COLUMNS, SweepTrainConfig, mean_by_width, width_sweep

    data = build_dataset(cfg["dataset"])
    t = cfg["train"]
    tc = SweepTrainConfig(t["epochs"], t["lr"], t["schedule"], t["batch_size"], t["momentum"], t["weight_decay"])
    cells_path = out / "cells.jsonl"
    done = {}
    if ctx["resume"]:
        for r in read_records(cells_path):
            if r.get("config_hash") == ctx["config_hash"] and "error" not in r["row"]:
                done[(r["row"]["width"], r["row"]["seed"])] = r["row"]

    def persist(row):
        append_record(cells_path, {"config_hash": ctx["config_hash"], "row": row})

    fresh = width_sweep(cfg["family"], cfg["widths"], data, tc, cfg["n_images"], tuple(cfg["seeds"]),
                        cfg["image_seed"], cfg["bn"], cfg["skip"], on_row=persist,
                        skip_cell=lambda w, s: (w, s) in done)
    rows = sorted(list(done.values()) + fresh, key=lambda r: (r["width"], r["seed"]))
    ctx["artifacts"].append(write_csv(out / "ntk_sweep.csv", [r for r in rows if "error" not in r], SWEEP_COLUMNS))
    return {"resumed_cells": len(done), "failed_cells": sum("error" in r for r in rows),
            "mean_correlation": mean_by_width(rows, "correlation"),
            "mean_rel_change": mean_by_width(rows, "rel_change")}


def _pretrain(cfg, data, spec, section="train", reg=None, attack=None):
    from .regtrain import train

    stats = nc.init_stats(spec)
    params = nc.init(spec, "he_uniform", cfg["seed"])
    params, trace = train(spec, params, data.train, _train_cfg(cfg[section], cfg["seed"], reg, attack), stats,
                          data.test)
    return params, stats, trace


def cmd_rank(cfg, out: Path, ctx) -> dict:
    from .rankprobe import TRACE_COLUMNS, layer_spectra, rank_finetune, spectrum_rows

    data = build_dataset(cfg["dataset"])
    spec = build_model(cfg["model"], data)
    init = nc.init(spec, "he_uniform", cfg["seed"])
    params, stats, trace = _pretrain(cfg, data, spec, "pretrain")
    ctx["artifacts"].append(write_csv(out / "pretrain_trace.csv", _trace_rows(trace), TRAIN_TRACE))
    ft = cfg["finetune"]
    attack = _attack_cfg(cfg["attack"])
    rows = [dict(r, mode="init") for r in spectrum_rows(0, layer_spectra(spec, init))]
    metrics = {"init_effective_rank": {r["layer"]: r["effective_rank"] for r in rows}}
    for mode in cfg["modes"]:
        st = copy.deepcopy(stats)
        res = rank_finetune(spec, params.copy(), data.train, mode, ft["epochs"], ft["schedule"], ft["clip_epochs"],
                            ft["quantile"], ft["batch_size"], ft["momentum"], None, st, cfg["seed"],
                            attack if ft["adversarial"] else None, False, data.test, attack, ft["lr"])
        rows.extend(dict(r, mode=mode) for r in res.trace)
        metrics[mode] = {"final_effective_rank": res.final_ranks(), "clean_acc": res.clean_acc,
                         "robust_acc": res.robust_acc, "warnings": res.warnings}
    ctx["artifacts"].append(write_csv(out / "rank_trace.csv", rows, ("mode",) + TRACE_COLUMNS))
    return metrics


def cmd_attack(cfg, out: Path, ctx) -> dict:
    from .regtrain import accuracy

    data = build_dataset(cfg["dataset"])
    spec = build_model(cfg["model"], data)
    train_attack = _attack_cfg(cfg["train_attack"]) if cfg["adversarial"] else None
    params, stats, trace = _pretrain(cfg, data, spec, "train", attack=train_attack)
    ctx["artifacts"].append(write_csv(out / "train_trace.csv", _trace_rows(trace), TRAIN_TRACE))
    params.save(out / "params.bin")
    attack = _attack_cfg(cfg["attack"])
    clean = accuracy(spec, params, data.test, stats)
    robust = accuracy(spec, params, data.test, stats, attack, np.random.default_rng([cfg["seed"], 2]))
    row = {"adversarial": cfg["adversarial"], "epsilon": attack.epsilon, "steps": attack.steps,
           "clean_acc": clean, "robust_acc": robust}
    ctx["artifacts"].append(write_csv(out / "attack.csv", [row], list(row)))
    return row


HANDLERS = {"local-minima": cmd_local_minima, "norm-bias": cmd_norm_bias, "ntk-sweep": cmd_ntk_sweep,
            "rank": cmd_rank, "attack": cmd_attack}


def run_experiment(command: str, raw: dict, out, seed=None, overrides=(), resume=False) -> dict:
    """Validate, run and record one experiment; returns the run record.

    Errors are recorded in ``runs.jsonl`` and then re-raised.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    record = {"command": command, "overrides": list(overrides), "started": started, "status": "error"}
    try:
        raw = apply_overrides(raw, overrides)
        if seed is not None:
            raw["seed"] = seed
        cfg = validate(command, raw)
        record.update(config=cfg, config_hash=config_hash(dict(cfg, command=command)), seed=cfg["seed"])
        ctx = {"resume": resume, "config_hash": record["config_hash"], "artifacts": []}
        metrics = HANDLERS[command](cfg, out, ctx)
        record.update(status="ok", metrics=metrics, artifacts=ctx["artifacts"])
        return record
    except Exception as exc:
        record["error"] = {"type": type(exc).__name__, "message": str(exc),
                           "errors": getattr(exc, "errors", [str(exc)])}
        if "config" not in record:
            record["config"] = raw
        raise
    finally:
        record["finished"] = time.time()
        append_record(out / "runs.jsonl", record)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probe", description="Loss-landscape probes for small networks.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON when possible; repeatable")
    p.add_argument("--resume", action="store_true", help="skip sweep cells already completed for this config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(["config: top level must be a JSON object"])
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        err = {"status": "error", "error": {"type": type(exc).__name__, "message": str(exc)}}
        Path(args.out).mkdir(parents=True, exist_ok=True)
        append_record(Path(args.out) / "runs.jsonl", dict(err, command=args.command, started=time.time()))
        print(json.dumps(err), file=sys.stderr)
        return 2
    try:
        record = run_experiment(args.command, raw, args.out, args.seed, args.override, args.resume)
    except ConfigError as exc:
        print(json.dumps({"status": "error", "error": {"type": "ConfigError", "errors": exc.errors}}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"status": "error", "error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 1
    print(json.dumps(_jsonable({"status": "ok", "config_hash": record["config_hash"],
                                "artifacts": record["artifacts"], "metrics": record["metrics"]}), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
