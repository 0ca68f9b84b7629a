"""Command-line entry point: run experiments, sweeps, and verification from
a config file.

Subcommands: run, sweep, verify. Configuration is YAML (JSON works too),
schema-validated with unknown keys rejected; repeated --set key=value flags
override file values. Exit codes are part of the contract:

  0  success
  1  verification found theorem violations
  2  configuration error
  3  runtime divergence (loss above 1e12); the partial trace is still written
  4  verification oracle inconclusive (grid argmin on the boundary)
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .engine import (
    RunConfig,
    apply_override,
    final_window_loss,
    records_to_csv,
    run,
    run_config_to_dict,
    sweep,
)
from .clients import STRATEGIES, LocalConfig
from .errors import ConfigError, FedMirrorError, InconclusiveError
from .optimizers import FAMILIES, GENERATOR_SPECS, OptimizerConfig
from .oracles import SUITES
from .synthetic import (
    SyntheticSpec,
    generate,
    instance_hash,
    load_instance,
    random_interpolation_instance,
)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INCONCLUSIVE = 4

OUTPUT_ENV_VAR = "FEDMIRROR_OUT"

_NoneType = type(None)

_SCHEMA = {
    "dataset": {
        "kind": str,
        "clients": int,
        "samples_per_client": int,
        "dim": int,
        "decay": float,
        "mean_var": float,
        "seed": int,
        "path": (str, _NoneType),
    },
    "run": {
        "rounds": int,
        "clients_per_round": (int, _NoneType),
        "seed": int,
        "eval": str,
    },
    "local": {
        "strategy": str,
        "eta_l": float,
        "steps": int,
        "batch_size": (int, str),
        "mu": float,
    },
    "optimizer": {
        "family": str,
        "eta_g": float,
        "epsilon": float,
        "epsilon_g": float,
        "beta1": float,
        "beta2": float,
        "force_identity_preconditioner": bool,
        "generator": (str, _NoneType),
    },
    "output": {
        "dir": (str, _NoneType),
        "name": str,
    },
    "sweep": {
        "grid": dict,
        "seeds": list,
    },
    "verify": {
        "suites": list,
        "cases": int,
        "rounds": int,
        "seed": int,
        "grid_points": int,
    },
}

_DEFAULTS = {
    "dataset": {
        "kind": "synthetic",
        "clients": 20,
        "samples_per_client": 30,
        "dim": 1000,
        "decay": 1.1,
        "mean_var": 0.1,
        "seed": 0,
        "path": None,
    },
    "run": {
        "rounds": 100,
        "clients_per_round": None,
        "seed": 0,
        "eval": "last-iterate",
    },
    "local": {
        "strategy": "sgd",
        "eta_l": 0.01,
        "steps": 20,
        "batch_size": "full",
        "mu": 0.0,
    },
    "optimizer": {
        "family": "fedduadagrad",
        "eta_g": 1.0,
        "epsilon": 1e-9,
        "epsilon_g": 0.0,
        "beta1": 0.9,
        "beta2": 0.99,
        "force_identity_preconditioner": False,
        "generator": None,
    },
    "output": {
        "dir": None,
        "name": "experiment",
    },
    "sweep": {
        "grid": {},
        "seeds": [0],
    },
    "verify": {
        "suites": ["theorem1", "theorem2", "theorem3"],
        "cases": 100,
        "rounds": 50,
        "seed": 0,
        "grid_points": 10_000,
    },
}


def _check_type(section: str, key: str, value, expected):
    if not isinstance(expected, tuple):
        expected = (expected,)
    if float in expected and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if int in expected and isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected {expected}, got boolean")
    if not isinstance(value, expected):
        names = "/".join(t.__name__ for t in expected)
        raise ConfigError(f"{section}.{key}: expected {names}, got {type(value).__name__} ({value!r})")
    return value


def _merge_and_validate(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    config = copy.deepcopy(_DEFAULTS)
    for section, content in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if content is None:
            continue
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            config[section][key] = _check_type(section, key, value, _SCHEMA[section][key])
    return config


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path!r}: {exc}") from exc
    return _merge_and_validate(raw if raw is not None else {})


def apply_set_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply repeated --set section.key=value flags; values parse as YAML."""
    config = copy.deepcopy(config)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        path, _, raw_value = item.partition("=")
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set path must be section.key, got {path!r}")
        section, key = parts
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"--set names unknown key {path!r}")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set value {raw_value!r} does not parse: {exc}") from exc
        config[section][key] = _check_type(section, key, value, _SCHEMA[section][key])
    return config


def build_instance(config: dict):
    ds = config["dataset"]
    kind = ds["kind"]
    if kind == "synthetic":
        spec = SyntheticSpec(
            clients=ds["clients"],
            samples_per_client=ds["samples_per_client"],
            dim=ds["dim"],
            decay=ds["decay"],
            mean_variance=ds["mean_var"],
            seed=ds["seed"],
        )
        return generate(spec)
    if kind == "interpolation":
        return random_interpolation_instance(
            ds["dim"], ds["clients"], ds["samples_per_client"], ds["seed"]
        )
    if kind == "file":
        if not ds["path"]:
            raise ConfigError("dataset.kind 'file' requires dataset.path")
        return load_instance(ds["path"])
    raise ConfigError(f"unknown dataset.kind {kind!r}")


def build_run_config(config: dict, num_clients: int) -> RunConfig:
    local = config["local"]
    opt = config["optimizer"]
    runc = config["run"]
    if local["strategy"] not in STRATEGIES:
        raise ConfigError(f"local.strategy must be one of {STRATEGIES}")
    if opt["family"] not in FAMILIES:
        raise ConfigError(f"optimizer.family must be one of {FAMILIES}")
    if opt["generator"] is not None and opt["generator"] not in GENERATOR_SPECS:
        raise ConfigError(f"optimizer.generator must be one of {GENERATOR_SPECS}")
    clients_per_round = runc["clients_per_round"]
    if clients_per_round is None:
        clients_per_round = num_clients
    try:
        local_cfg = LocalConfig(
            strategy=local["strategy"],
            eta_l=local["eta_l"],
            steps=local["steps"],
            batch_size=local["batch_size"],
            mu=local["mu"],
        )
        opt_cfg = OptimizerConfig(
            family=opt["family"],
            eta_g=opt["eta_g"],
            epsilon=opt["epsilon"],
            epsilon_g=opt["epsilon_g"],
            beta1=opt["beta1"],
            beta2=opt["beta2"],
            force_identity_preconditioner=opt["force_identity_preconditioner"],
            generator=opt["generator"],
        )
        return RunConfig(
            rounds=runc["rounds"],
            clients_per_round=clients_per_round,
            local=local_cfg,
            optimizer=opt_cfg,
            seed=runc["seed"],
            eval_mode=runc["eval"],
            dataset_ref=config["dataset"]["path"] or config["dataset"]["kind"],
        )
    except FedMirrorError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_out_dir(config: dict, flag_value: str | None) -> Path:
    if flag_value:
        root = flag_value
    elif config["output"]["dir"]:
        root = config["output"]["dir"]
    else:
        root = os.environ.get(OUTPUT_ENV_VAR, "fedmirror-out")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


def cmd_run(args) -> int:
    config = apply_set_overrides(load_config(args.config), args.set or [])
    instance = build_instance(config)
    cfg = build_run_config(config, instance.num_clients)
    result = run(cfg, instance)

    out_dir = resolve_out_dir(config, args.out)
    name = config["output"]["name"]
    csv_path = out_dir / f"{name}.csv"
    meta_path = out_dir / f"{name}.meta.json"
    csv_path.write_text(records_to_csv(result.records))
    sidecar = {
        "config": config,
        "run_config": run_config_to_dict(cfg),
        "version": __version__,
        "instance_hash": instance_hash(instance),
        "instance_metadata": instance.metadata,
        "skipped_rounds": result.metadata["skipped_rounds"],
        "diverged_at": result.metadata["diverged_at"],
        "timing_ms": result.metadata["total_wall_ms"],
    }
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))

    final = result.records[-1].global_loss if result.records else float("nan")
    _say(args.quiet, f"run: {len(result.records)} rounds, final loss {final:.6e}")
    _say(args.quiet, f"wrote {csv_path} and {meta_path}")
    if result.metadata["diverged_at"] is not None:
        _say(args.quiet, f"diverged at round {result.metadata['diverged_at']}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = apply_set_overrides(load_config(args.config), args.set or [])
    grid = config["sweep"]["grid"]
    seeds = config["sweep"]["seeds"]
    if not grid:
        raise ConfigError("sweep.grid is empty")
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("sweep.seeds must be a list of integers")
    instance = build_instance(config)
    base = build_run_config(config, instance.num_clients)
    for path, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.grid[{path!r}] must be a nonempty list")
        apply_override(base, path, values[0])  # validates the path up front

    out_dir = resolve_out_dir(config, args.out)
    name = config["output"]["name"]
    report = sweep(
        grid,
        base,
        seeds,
        instance,
        threads=max(1, args.threads),
        cache_dir=out_dir / f"{name}.cells",
    )
    payload = {
        "grid_keys": report.grid_keys,
        "seeds": report.seeds,
        "reused_cells": report.reused,
        "best_index": report.best_index,
        "cells": [c.__dict__ for c in report.cells],
        "version": __version__,
        "instance_hash": instance_hash(instance),
    }
    report_path = out_dir / f"{name}.sweep.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    if report.best is not None:
        _say(args.quiet, f"sweep: best cell {report.best.params} mean loss {report.best.mean:.6e}")
    else:
        _say(args.quiet, "sweep: every cell failed")
    _say(args.quiet, f"wrote {report_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    config = apply_set_overrides(load_config(args.config), args.set or [])
    verify_cfg = config["verify"]
    names = verify_cfg["suites"]
    if not names:
        raise ConfigError("verify.suites is empty")
    inject = args.inject_eta_scale
    reports = []
    inconclusive = 0
    for suite_name in names:
        if suite_name not in SUITES:
            raise ConfigError(f"unknown verify suite {suite_name!r}; expected one of {sorted(SUITES)}")
        kwargs = {"num_cases": verify_cfg["cases"], "seed": verify_cfg["seed"], "inject": inject}
        if suite_name in ("theorem1", "theorem2"):
            kwargs["rounds"] = verify_cfg["rounds"]
        else:
            kwargs["num_points"] = verify_cfg["grid_points"]
        try:
            report = SUITES[suite_name](**kwargs)
        except InconclusiveError as exc:
            _say(args.quiet, f"{suite_name}: inconclusive ({exc})")
            inconclusive += 1
            continue
        reports.append(report)
        inconclusive += report.inconclusive
        _say(
            args.quiet,
            f"{suite_name}: {report.checked_rounds} rounds checked, "
            f"{len(report.violations)} violations, {report.excluded} excluded, "
            f"{report.inconclusive} inconclusive",
        )

    out_dir = resolve_out_dir(config, args.out)
    name = config["output"]["name"]
    payload = {
        "suites": [r.to_dict() for r in reports],
        "inject_eta_scale": inject,
        "ok": all(r.ok for r in reports) and inconclusive == 0,
        "version": __version__,
    }
    report_path = out_dir / f"{name}.verify.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    _say(args.quiet, f"wrote {report_path}")
    if any(not r.ok for r in reports):
        return EXIT_VIOLATIONS
    if inconclusive > 0:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmirror",
        description="Deterministic federated-learning simulator with verification suites.",
    )
    parser.add_argument("--version", action="version", version=f"fedmirror {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler, blurb in (
        ("run", cmd_run, "execute one experiment and write its trace"),
        ("sweep", cmd_sweep, "run a hyperparameter grid and summarize it"),
        ("verify", cmd_verify, "run the numerical verification suites"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help="path to the YAML/JSON experiment file")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for sweep cells")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        if name == "verify":
            p.add_argument(
                "--inject-eta-scale",
                type=float,
                default=1.0,
                help=argparse.SUPPRESS,
            )
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InconclusiveError as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE


def main_entry() -> None:
    raise SystemExit(main())
