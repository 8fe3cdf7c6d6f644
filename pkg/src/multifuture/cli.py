"""Operator entry point: generate scenarios, train, predict, evaluate.

Configuration is layered: built-in defaults, then an optional JSON config
file, then repeated ``--set dotted.key=value`` overrides, then the short
flags. The effective configuration is echoed to stdout and written next to
the outputs so every run can be reproduced. Exit codes: 0 success,
2 usage/config error, 1 runtime error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import inference, metrics, persistence, training
from .errors import (
    ConfigError,
    MultifutureError,
    ScenarioParseError,
    TrainingDivergenceError,
)
from .inference import PredictionSet, predict_scenario
from .metrics import EvalReport, ScenarioEval, horizons_from_seconds
from .model import Forecaster, ModelConfig
from .scenegen import (
    GeneratorConfig,
    Scenario,
    ScenarioSet,
    generate_scenario_set,
    read_scenarios,
    write_scenarios,
)
from .training import TrainConfig, train, write_loss_csv

log = logging.getLogger("multifuture")


def _defaults(subcommand: str) -> dict:
    if subcommand == "generate":
        return {
            "out": "scenarios.jsonl",
            "seed": 0,
            "n": 10,
            "generator": GeneratorConfig().to_json(),
        }
    if subcommand == "train":
        return {
            "scenarios": None,
            "out": "run",
            "resume": None,
            "strict_bounds": False,
            "model": ModelConfig().to_json(),
            "train": TrainConfig().to_json(),
        }
    if subcommand == "predict":
        return {
            "checkpoint": None,
            "scenarios": None,
            "out": "predictions",
            "k": 20,
            "gamma": 1.0,
            "jobs": 1,
            "emit_heatmaps": False,
            "seed": 0,
        }
    if subcommand == "eval":
        return {
            "scenarios": None,
            "predictions": None,
            "checkpoint": None,
            "out": "eval",
            "k": 20,
            "gamma": 1.0,
            "jobs": 1,
            "horizon_unit": "seconds",  # or "frames"
            "horizons": [1, 2, 3],
            "seed": 0,
        }
    raise ConfigError(f"unknown subcommand {subcommand!r}")


def _apply_dotted(config: dict, key: str, value) -> None:
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _flatten(config: dict, prefix: str = "") -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key, value in config.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def _parse_set(raw: str):
    if "=" not in raw:
        raise ConfigError(f"--set expects key=value, got {raw!r}")
    key, _, value = raw.partition("=")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value  # bare strings are fine


def build_config(args: argparse.Namespace) -> dict:
    config = copy.deepcopy(_defaults(args.subcommand))
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config}: {exc}") from exc
        for key, value in _flatten(file_cfg).items():
            _apply_dotted(config, key, value)
    for raw in args.set or []:
        key, value = _parse_set(raw)
        _apply_dotted(config, key, value)
    # Short flags win over file and --set.
    for flag, key in _FLAG_KEYS.get(args.subcommand, {}).items():
        value = getattr(args, flag, None)
        if value is not None and value is not False:
            _apply_dotted(config, key, value)
    return config


_FLAG_KEYS = {
    "generate": {"seed": "seed", "n": "n", "j": "generator.j", "out": "out"},
    "train": {
        "seed": "train.seed",
        "out": "out",
        "scenarios": "scenarios",
        "resume": "resume",
        "epochs": "train.epochs",
        "strict_bounds": "strict_bounds",
    },
    "predict": {
        "seed": "seed",
        "out": "out",
        "scenarios": "scenarios",
        "checkpoint": "checkpoint",
        "k": "k",
        "gamma": "gamma",
        "jobs": "jobs",
        "emit_heatmaps": "emit_heatmaps",
    },
    "eval": {
        "seed": "seed",
        "out": "out",
        "scenarios": "scenarios",
        "predictions": "predictions",
        "checkpoint": "checkpoint",
        "k": "k",
        "gamma": "gamma",
        "jobs": "jobs",
    },
}


def _echo_config(config: dict, out_dir: Optional[str]) -> None:
    line = json.dumps({"effective_config": config}, sort_keys=True)
    print(line)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "effective_config.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _require(config: dict, key: str) -> str:
    value = config.get(key)
    if not value:
        raise ConfigError(f"{key!r} must be set")
    return value


def _open_scenarios(path: str) -> ScenarioSet:
    if not os.path.exists(path):
        raise FileNotFoundError(f"scenario file not found: {path}")
    return read_scenarios(path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(config: dict) -> int:
    gen_cfg = GeneratorConfig.from_json(config["generator"])
    out = _require(config, "out")
    _echo_config(config, os.path.dirname(out) or ".")
    sset = generate_scenario_set(gen_cfg, int(config["seed"]), int(config["n"]))
    write_scenarios(sset, out)
    mean_j = float(np.mean([s.n_futures for s in sset.scenarios]))
    mean_len = float(
        np.mean([len(f) for s in sset.scenarios for f in s.futures])
    )
    print(
        json.dumps(
            {
                "scenarios": len(sset.scenarios),
                "mean_futures": mean_j,
                "mean_future_len": mean_len,
                "out": out,
            },
            sort_keys=True,
        )
    )
    return 0


def _checkpoint_meta(model_cfg, train_cfg, result, strict_bounds) -> dict:
    tail = [
        {"l_cls": b.l_cls, "l_reg": b.l_reg, "l_wd": b.l_wd, "total": b.total}
        for b in result.history[-20:]
    ]
    return {
        "model_config": model_cfg.to_json(),
        "train_config": train_cfg.to_json(),
        "seed": train_cfg.seed,
        "epoch": result.epochs_run,
        "strict_bounds": strict_bounds,
        "loss_tail": tail,
    }


def cmd_train(config: dict) -> int:
    out_dir = _require(config, "out")
    _echo_config(config, out_dir)
    sset = _open_scenarios(_require(config, "scenarios"))

    resume_path = config.get("resume")
    start_epoch = 0
    resume_values = None
    resume_opt = None
    if resume_path:
        arrays, meta = persistence.load(resume_path)
        model_cfg = ModelConfig.from_json(meta["model_config"])
        train_cfg = TrainConfig.from_json(
            {**meta["train_config"], "epochs": config["train"]["epochs"]}
        )
        start_epoch = int(meta["epoch"])
        resume_values = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
        resume_opt = {n: a for n, a in arrays.items() if n.startswith("opt.")}
        strict = bool(meta.get("strict_bounds", False))
    else:
        model_cfg = ModelConfig.from_json(config["model"])
        train_cfg = TrainConfig.from_json(config["train"])
        strict = bool(config["strict_bounds"])

    def on_epoch(epoch, breakdown):
        log.info(
            "epoch %d: total=%.6f cls=%.6f reg=%.6f wd=%.6f",
            epoch, breakdown.total, breakdown.l_cls, breakdown.l_reg, breakdown.l_wd,
        )

    result = train(
        sset,
        model_cfg,
        train_cfg,
        on_epoch=on_epoch,
        resume_values=resume_values,
        resume_opt_state=resume_opt,
        start_epoch=start_epoch,
        strict_bounds=strict,
    )
    ckpt = os.path.join(out_dir, "checkpoint.mvck")
    persistence.save_checkpoint(
        result.model.store,
        _checkpoint_meta(model_cfg, train_cfg, result, strict),
        ckpt,
        extra_arrays=result.optimizer_state,
    )
    write_loss_csv(result.history, os.path.join(out_dir, "loss_log.csv"),
                   start_epoch=start_epoch)
    print(
        json.dumps(
            {
                "checkpoint": ckpt,
                "epochs_run": result.epochs_run,
                "final_total_loss": result.history[-1].total,
                "stopped_early": result.stopped_early,
            },
            sort_keys=True,
        )
    )
    return 0


def load_model(checkpoint_path: str) -> Forecaster:
    arrays, meta = persistence.load(checkpoint_path)
    model_cfg = ModelConfig.from_json(meta["model_config"])
    model = Forecaster(model_cfg, seed=int(meta.get("seed", 0)))
    persistence.load_into_store(
        model.store, {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    )
    return model


def _predict_all(
    model: Forecaster,
    scenarios: Sequence[Scenario],
    k: int,
    gamma: float,
    jobs: int,
    keep_beliefs: bool,
) -> List[PredictionSet]:
    def one(s: Scenario) -> PredictionSet:
        return predict_scenario(model, s, k=k, gamma0=gamma, keep_beliefs=keep_beliefs)

    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, scenarios))
    return [one(s) for s in scenarios]


def _write_heatmaps(pred: PredictionSet, scenario: Scenario, heat_dir: str) -> None:
    os.makedirs(heat_dir, exist_ok=True)
    grid = scenario.fine_grid
    csv_path = os.path.join(heat_dir, f"{pred.scenario_id}.beliefs.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for belief in pred.beliefs or []:
            writer.writerow([repr(float(v)) for v in belief.reshape(-1)])
    for t, belief in enumerate(pred.beliefs or []):
        peak = float(belief.max())
        scaled = (
            np.zeros_like(belief) if peak <= 0 else belief / peak
        )
        img = np.round(scaled * 255).astype(np.uint8)
        pgm = os.path.join(heat_dir, f"{pred.scenario_id}.t{t:03d}.pgm")
        with open(pgm, "wb") as fh:
            fh.write(f"P5\n{grid.cols} {grid.rows}\n255\n".encode("ascii"))
            fh.write(img.tobytes())


def cmd_predict(config: dict) -> int:
    out_dir = _require(config, "out")
    _echo_config(config, out_dir)
    model = load_model(_require(config, "checkpoint"))
    sset = _open_scenarios(_require(config, "scenarios"))
    emit = bool(config["emit_heatmaps"])
    preds = _predict_all(
        model,
        sset.scenarios,
        k=int(config["k"]),
        gamma=float(config["gamma"]),
        jobs=int(config["jobs"]),
        keep_beliefs=emit,
    )
    pred_path = os.path.join(out_dir, "predictions.jsonl")
    inference.write_predictions(preds, pred_path)
    if emit:
        heat_dir = os.path.join(out_dir, "heatmaps")
        for pred, scenario in zip(preds, sset.scenarios):
            _write_heatmaps(pred, scenario, heat_dir)
    oob = sum(p.out_of_cell_offsets for p in preds)
    print(
        json.dumps(
            {
                "predictions": pred_path,
                "scenarios": len(preds),
                "k": int(config["k"]),
                "offsets_outside_cell": oob,
            },
            sort_keys=True,
        )
    )
    return 0


_VIEW_GROUPS = {
    "45-degree": ("deg45_a", "deg45_b", "deg45_c"),
    "top-down": ("topdown",),
}


def _group_filter(scenarios: Sequence[Scenario]) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {"all": list(range(len(scenarios)))}
    for name, tags in _VIEW_GROUPS.items():
        members = [i for i, s in enumerate(scenarios) if s.view_tag in tags]
        if members:
            groups[name] = members
    return groups


def cmd_eval(config: dict) -> int:
    out_dir = _require(config, "out")
    _echo_config(config, out_dir)
    sset = _open_scenarios(_require(config, "scenarios"))
    scenarios = sset.scenarios
    k = int(config["k"])

    beliefs_available = False
    if config.get("predictions"):
        if not os.path.exists(config["predictions"]):
            raise FileNotFoundError(
                f"prediction file not found: {config['predictions']}"
            )
        by_id = inference.read_predictions(config["predictions"])
        missing = [s.scenario_id for s in scenarios if s.scenario_id not in by_id]
        if missing:
            raise ConfigError(
                f"predictions missing for scenario ids: {', '.join(missing)}"
            )
        preds = [by_id[s.scenario_id] for s in scenarios]
    elif config.get("checkpoint"):
        model = load_model(config["checkpoint"])
        preds = _predict_all(
            model,
            scenarios,
            k=k,
            gamma=float(config["gamma"]),
            jobs=int(config["jobs"]),
            keep_beliefs=True,
        )
        beliefs_available = True
    else:
        raise ConfigError("eval needs either 'predictions' or 'checkpoint'")

    unit = config["horizon_unit"]
    if unit == "seconds":
        fps = scenarios[0].fps if scenarios else 2.5
        horizons = horizons_from_seconds([float(v) for v in config["horizons"]], fps)
    elif unit == "frames":
        horizons = [int(v) for v in config["horizons"]]
    else:
        raise ConfigError(f"horizon_unit must be 'seconds' or 'frames', got {unit!r}")

    items = [
        ScenarioEval(
            futures=s.futures,
            predictions=p.trajectories,
            beliefs=p.beliefs if beliefs_available else None,
            grid=s.fine_grid,
        )
        for s, p in zip(scenarios, preds)
    ]
    reports: Dict[str, EvalReport] = {}
    for name, members in _group_filter(scenarios).items():
        reports[name] = metrics.evaluate(
            [items[i] for i in members], k=k,
            horizons=horizons if beliefs_available else (),
        )
    metrics.write_report_json(reports, os.path.join(out_dir, "report.json"))
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        for name in sorted(reports):
            fh.write(f"[{name}]\n{reports[name].table()}\n\n")
    per_path = os.path.join(out_dir, "per_scenario.csv")
    with open(per_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["scenario_id", "view_tag", "futures", "ade", "fde", "min_ade_k", "min_fde_k"]
        )
        for s, item in zip(scenarios, items):
            r = metrics.evaluate([item], k=k)
            writer.writerow(
                [s.scenario_id, s.view_tag, len(s.futures),
                 repr(r.ade), repr(r.fde), repr(r.min_ade_k), repr(r.min_fde_k)]
            )
    print(reports["all"].table())
    print(json.dumps({"report": os.path.join(out_dir, "report.json")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Entry point


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multifuture",
        description="Multi-future trajectory forecasting toolkit.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)

    g = sub.add_parser("generate", help="write a synthetic fork-scenario file")
    common(g)
    g.add_argument("--n", type=int, default=None, help="number of scenarios")
    g.add_argument("--j", type=int, default=None, help="futures per scenario")

    t = sub.add_parser("train", help="fit a model on a scenario file")
    common(t)
    t.add_argument("--scenarios", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--strict-bounds", dest="strict_bounds", action="store_true",
                   default=None)

    p = sub.add_parser("predict", help="decode trajectories from a checkpoint")
    common(p)
    p.add_argument("--scenarios", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--emit-heatmaps", dest="emit_heatmaps", action="store_true",
                   default=None)

    e = sub.add_parser("eval", help="score predictions against futures")
    common(e)
    e.add_argument("--scenarios", default=None)
    e.add_argument("--predictions", default=None)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--k", type=int, default=None)
    e.add_argument("--gamma", type=float, default=None)
    e.add_argument("--jobs", type=int, default=None)
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def _error_line(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("MVT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        config = build_config(args)
        return _COMMANDS[args.subcommand](config)
    except (ConfigError, ScenarioParseError, FileNotFoundError) as exc:
        _error_line(type(exc).__name__, str(exc))
        return 2
    except TrainingDivergenceError as exc:
        _error_line(type(exc).__name__, str(exc))
        return 3
    except MultifutureError as exc:
        _error_line(type(exc).__name__, str(exc))
        return 1
    except OSError as exc:
        _error_line(type(exc).__name__, str(exc))
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
