"""Batch command-line entry points.

Commands: synth | train | forecast | evaluate | diagnose | gridsearch |
ablate. Model and training parameters come from a JSON config file (flags
cover only paths, command and seed, so the written manifest is complete);
every run writes a manifest.json with the fully resolved configuration.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .data import (DataError, ForecastCube, SyntheticSpec, generate_synthetic,
                   load_dataset, save_dataset, sliced_metrics)
from .diagnostics import diagnose as run_diagnose
from .model import ModelConfig
from .training import (D_H_GRID, LR_GRID, TrainConfig, _cell_masks, forecast,
                       load_model, save_model, train)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

COMMANDS = ("synth", "train", "forecast", "evaluate", "diagnose",
            "gridsearch", "ablate")
VARIANTS = ("mqcnn", "mqt", "mqt_nods", "mqt_all")


class ConfigError(ValueError):
    """The config file or its contents failed validation."""


# -- config --------------------------------------------------------------


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _section(cfg, name, cls, **overrides):
    """Build a config dataclass from a config section plus overrides."""
    body = dict(cfg.get(name, {}))
    body.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**body)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def _model_config(cfg, variant=None):
    mc = _section(cfg, "model", ModelConfig, variant=variant)
    for key in ("quantiles", "enc_dilations", "pos_dilations"):
        setattr(mc, key, tuple(getattr(mc, key)))
    return mc


def _resolve_out(args):
    out = args.out or os.environ.get("MQFORECAST_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, command, args, sections):
    resolved = {}
    for name, obj in sections.items():
        if dataclasses.is_dataclass(obj):
            resolved[name] = dataclasses.asdict(obj)
        else:
            resolved[name] = obj
    manifest = {
        "command": command,
        "version": __version__,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "data": args.data,
        "model_path": getattr(args, "model", None),
        "cube": getattr(args, "cube", None),
        "out": out,
        "config": resolved,
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def _write_table(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# -- commands ------------------------------------------------------------


def _cmd_synth(args, cfg, out):
    spec = _section(cfg, "synth", SyntheticSpec, seed=args.seed)
    quantiles = tuple(cfg.get("model", {}).get("quantiles", (0.5, 0.9)))
    dataset, _ = generate_synthetic(spec, quantile_levels=quantiles)
    path = os.path.join(out, "data.csv")
    save_dataset(dataset, path)
    _write_manifest(out, "synth", args, {"synth": spec})
    print(f"wrote {dataset.n_series} series x {dataset.n_time} periods "
          f"to {path}")
    return EXIT_OK


def _train_one(dataset, cfg, args, variant, out):
    mc = _model_config(cfg, variant=variant)
    tc = _section(cfg, "train", TrainConfig, seed=args.seed)
    model, scaler, report = train(dataset, mc, tc, out_dir=out)
    return model, scaler, report, mc, tc


def _cmd_train(args, cfg, out):
    dataset = load_dataset(args.data)
    model, scaler, report, mc, tc = _train_one(
        dataset, cfg, args, args.variant, out)
    save_model(os.path.join(out, "model.npz"), model, scaler)
    with open(os.path.join(out, "train_report.txt"), "w") as f:
        f.write(report.to_text())
    _write_manifest(out, "train", args, {"model": mc, "train": tc})
    print(report.to_text())
    return EXIT_OK


def _forecast_fcts(cfg, dataset):
    section = cfg.get("forecast", {})
    if "fcts" in section:
        return np.asarray(section["fcts"], dtype=int)
    start = int(section.get("start", 0))
    end = int(section.get("end", dataset.n_time))
    return np.arange(start, end)


def _cmd_forecast(args, cfg, out):
    dataset = load_dataset(args.data)
    model, scaler = load_model(args.model)
    fcts = _forecast_fcts(cfg, dataset)
    cube = forecast(dataset, model, scaler, fcts=fcts)
    path = os.path.join(out, "forecast.csv")
    cube.to_csv(path)
    _write_manifest(out, "forecast", args,
                    {"model": model.config, "forecast": {"fcts": fcts.tolist()}})
    print(f"wrote forecasts for {len(fcts)} FCTs to {path}")
    return EXIT_OK


def _split_mask(dataset, cube, split):
    train_m, val_m, test_m = _cell_masks(dataset, cube.n_horizons)
    full = {"train": train_m, "val": val_m, "test": test_m,
            "all": train_m | val_m | test_m}[split]
    return full[:, cube.fcts, :]


def _metric_rows(metrics):
    rows = []
    for name in sorted(metrics):
        for q in sorted(metrics[name]):
            rows.append([name, q, repr(float(metrics[name][q]))])
    return rows


def _cmd_evaluate(args, cfg, out):
    dataset = load_dataset(args.data)
    cube = ForecastCube.from_csv(args.cube)
    split = cfg.get("evaluate", {}).get("split", "test")
    if split not in ("train", "val", "test", "all"):
        raise ConfigError(f"unknown evaluation split: {split}")
    metrics = sliced_metrics(cube, dataset,
                             cell_mask=_split_mask(dataset, cube, split))
    path = os.path.join(out, "metrics.csv")
    _write_table(path, ["slice", "quantile", "normalized_ql"],
                 _metric_rows(metrics))
    _write_manifest(out, "evaluate", args, {"evaluate": {"split": split}})
    for name in sorted(metrics):
        for q in sorted(metrics[name]):
            print(f"{name:>10}  P{int(q * 100):02d}  "
                  f"{metrics[name][q]:.6f}")
    return EXIT_OK


def _cmd_diagnose(args, cfg, out):
    dataset = load_dataset(args.data)
    cube = ForecastCube.from_csv(args.cube)
    section = cfg.get("diagnose", {})
    pi = float(section.get("pi", 0.9))
    weighting = section.get("weighting", "demand")
    b = int(section.get("bootstrap", 1000))
    report, stats = run_diagnose(cube, dataset, pi=pi, weighting=weighting,
                                 b=b, seed=args.seed)
    path = os.path.join(out, "volatility.csv")
    report.to_csv(path)
    _write_manifest(out, "diagnose", args, {
        "diagnose": {"pi": pi, "weighting": weighting, "bootstrap": b},
        "exclusions": dataclasses.asdict(stats),
    })
    print(f"{stats.n_kept}/{stats.n_total} trajectories kept "
          f"(crossing {stats.n_crossing}, non-positive {stats.n_nonpositive}, "
          f"range {stats.n_range}); report -> {path}")
    for i, lead in enumerate(report.lead_times):
        print(f"lead {int(lead):3d}  V {report.mean_v[i]:+.6f}  "
              f"[{report.ci_lo[i]:+.6f}, {report.ci_hi[i]:+.6f}]")
    return EXIT_OK


def _val_loss(report):
    return min(row[2] for row in report.epochs)


def _n_epochs(report):
    return len(report.epochs)


def _cmd_gridsearch(args, cfg, out):
    dataset = load_dataset(args.data)
    section = cfg.get("gridsearch", {})
    d_h_grid = tuple(section.get("d_h", D_H_GRID))
    lr_grid = tuple(section.get("learning_rate", LR_GRID))
    rows, best = [], None
    for d_h in d_h_grid:
        for lr in lr_grid:
            trial_cfg = dict(cfg)
            trial_cfg["model"] = dict(cfg.get("model", {}), d_h=d_h)
            trial_cfg["train"] = dict(cfg.get("train", {}), learning_rate=lr)
            model, scaler, report, mc, tc = _train_one(
                dataset, trial_cfg, args, args.variant, None)
            loss = _val_loss(report)
            rows.append([d_h, lr, repr(float(loss)), _n_epochs(report)])
            print(f"d_h={d_h:4d}  lr={lr:.0e}  val loss {loss:.6f}")
            if best is None or loss < best[0]:
                best = (loss, model, scaler, d_h, lr)
    _write_table(os.path.join(out, "gridsearch.csv"),
                 ["d_h", "learning_rate", "val_loss", "epochs"], rows)
    save_model(os.path.join(out, "model.npz"), best[1], best[2])
    _write_manifest(out, "gridsearch", args, {
        "gridsearch": {"d_h": list(d_h_grid), "learning_rate": list(lr_grid)},
        "best": {"d_h": best[3], "learning_rate": best[4],
                 "val_loss": best[0]},
    })
    print(f"best: d_h={best[3]} lr={best[4]:.0e} (val loss {best[0]:.6f})")
    return EXIT_OK


def _cmd_ablate(args, cfg, out):
    dataset = load_dataset(args.data)
    fcts = _forecast_fcts(cfg, dataset)
    metrics = {}
    for variant in VARIANTS:
        model, scaler, report, mc, tc = _train_one(
            dataset, cfg, args, variant, None)
        cube = forecast(dataset, model, scaler, fcts=fcts)
        cube.to_csv(os.path.join(out, f"forecast_{variant}.csv"))
        save_model(os.path.join(out, f"model_{variant}.npz"), model, scaler)
        metrics[variant] = sliced_metrics(
            cube, dataset, cell_mask=_split_mask(dataset, cube, "test"))
        print(f"{variant}: trained {_n_epochs(report)} epochs, "
              f"val loss {_val_loss(report):.6f}")
    baseline = metrics["mqcnn"]
    rows = []
    header = ["slice", "quantile"] + list(VARIANTS)
    for name in sorted(baseline):
        for q in sorted(baseline[name]):
            row = [name, q]
            for variant in VARIANTS:
                rel = metrics[variant][name][q] / baseline[name][q]
                row.append(f"{rel:.3f}")
            rows.append(row)
    _write_table(os.path.join(out, "ablation.csv"), header, rows)
    _write_manifest(out, "ablate", args, {
        "model": _model_config(cfg),
        "train": _section(cfg, "train", TrainConfig, seed=args.seed),
    })
    print("relative normalized QL (mqcnn = 1.000):")
    print("  ".join(f"{h:>10}" for h in header))
    for row in rows:
        print("  ".join(f"{str(v):>10}" for v in row))
    return EXIT_OK


# -- entry point ---------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mqforecast",
        description="Multi-horizon quantile forecasting pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--data", help="dataset CSV path")
    parser.add_argument("--model", help="model checkpoint (.npz)")
    parser.add_argument("--cube", help="forecast cube CSV")
    parser.add_argument("--out", help="output directory "
                        "(or MQFORECAST_OUT env var; default: cwd)")
    parser.add_argument("--variant", choices=VARIANTS, default=None)
    parser.add_argument("--seed", type=int, default=0)
    return parser


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "diagnose": _cmd_diagnose,
    "gridsearch": _cmd_gridsearch,
    "ablate": _cmd_ablate,
}

_REQUIRED = {
    "train": ("data",),
    "forecast": ("data", "model"),
    "evaluate": ("data", "cube"),
    "diagnose": ("data", "cube"),
    "gridsearch": ("data",),
    "ablate": ("data",),
}


def run_command(argv):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    for flag in _REQUIRED.get(args.command, ()):
        if getattr(args, flag) is None:
            parser.error(f"{args.command} requires --{flag}")
    try:
        cfg = _load_config(args.config)
        out = _resolve_out(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _HANDLERS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # categorized runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
