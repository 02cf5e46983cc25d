"""Command-line pipeline: collect, train-gen, train-policy, eval, scenario.

Exit codes: 0 on success, 2 on configuration or input errors, 1 on runtime failures.
Every artifact gets a ``<artifact>.manifest`` key-value file next to it.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time

from . import __version__
from .config import Config, load_config, stage_rng, stage_seed
from .errors import ConfigError, ModelFormatError, RingflowError
from .evaluation import ScenarioSpec, export_results, leader_follower, macro_alignment
from .generator import train_generator
from .idm import IdmParams, collect_runs, read_dataset, write_dataset
from .persist import load_model, save_model
from .policy import train_policy

log = logging.getLogger("ringflow")


class UsageError(Exception):
    """Bad input path or argument; maps to exit code 2."""


def write_manifest(artifact, cfg: Config, stage: str, inputs=()) -> str:
    artifact = os.fspath(artifact)
    with open(artifact, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    lines = [
        f"artifact = {os.path.basename(artifact)}",
        f"stage = {stage}",
        f"sha256 = {digest}",
        f"config_hash = {cfg.hash()}",
        f"seed = {cfg.seed}",
        f"tool_version = {__version__}",
        f"created = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
    ]
    lines += [f"input = {os.fspath(p)}" for p in inputs]
    path = artifact + ".manifest"
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            key, _, val = line.partition("=")
            if _:
                out.setdefault(key.strip(), val.strip())
    return out


def _require(path, what):
    if path is None:
        raise UsageError(f"missing --{what}")
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _load_data(path):
    _require(path, "data")
    try:
        return read_dataset(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from exc


def _check_geometry(cfg: Config, dataset):
    if dataset.n_vehicles != cfg.ring.n_vehicles or dataset.radius != cfg.ring.radius:
        raise ConfigError("dataset geometry does not match ring.n_vehicles / ring.radius", key="ring")


def _parse_ks(text: str):
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(k) for k in text.split(","))
    except ValueError:
        raise UsageError(f"bad --k value {text!r}; use e.g. 1..4 or 1,3") from None


# -- subcommands ---------------------------------------------------------------------


def cmd_collect(args, cfg: Config):
    seed = stage_seed(cfg.seed, "collect")
    log.info("collecting %d runs x %d steps", cfg.collect.runs, cfg.collect.steps)
    data = collect_runs(cfg.collect_config(), seed)
    write_dataset(data, args.out)
    write_manifest(args.out, cfg, "collect")
    log.info("wrote %s", args.out)


def cmd_train_gen(args, cfg: Config):
    data = _load_data(args.data)
    _check_geometry(cfg, data)
    model, curve = train_generator(data, cfg.descriptor, cfg.generator_hyper(), stage_rng(cfg.seed, "gen"), cfg.bounds)
    save_model(model, "generator", args.out)
    write_manifest(args.out, cfg, "train-gen", [args.data])
    if args.curve:
        _write_curve(args.curve, ("iteration", "loss"), curve)
    log.info("wrote %s", args.out)


def cmd_train_policy(args, cfg: Config):
    data = _load_data(args.data)
    _check_geometry(cfg, data)
    gen = load_model(_require(args.gen, "gen"), "generator")
    model, curve = train_policy(data, gen, cfg.descriptor, cfg.ppo_hyper(), stage_rng(cfg.seed, "policy"), cfg.bounds)
    save_model(model, "policy", args.out)
    write_manifest(args.out, cfg, "train-policy", [args.data, args.gen])
    if args.curve:
        _write_curve(args.curve, ("iteration", "J", "micro", "macro", "clip_frac", "kl"), curve)
    log.info("wrote %s", args.out)


def cmd_eval(args, cfg: Config):
    data = _load_data(args.data)
    _check_geometry(cfg, data)
    policy = load_model(_require(args.policy, "policy"), "policy")
    gen = load_model(_require(args.gen, "gen"), "generator")
    ks = _parse_ks(args.k) if args.k else cfg.eval.ks
    if any(not 0 <= k <= data.n_vehicles for k in ks):
        raise UsageError(f"--k values must lie in [0, {data.n_vehicles}]")
    n = args.rollouts or cfg.eval.n_rollouts
    steps = cfg.eval.steps or None
    rows = macro_alignment(policy, gen, data, ks, n, stage_seed(cfg.seed, "eval"), cfg.descriptor, cfg.weights,
                           steps=steps, t_max=cfg.generator.t_max)
    meta = {"pooling": "all vehicles and steps pooled per K across rollouts", "start": "t=0 of run (i mod runs)",
            "steps": steps or data.n_steps - 1, "config_hash": cfg.hash()}
    export_results(rows, args.out, meta=meta)
    write_manifest(args.out, cfg, "eval", [args.data, args.policy, args.gen])
    for r in rows:
        log.info("K=%d speed %.3f+-%.3f gap %.3f+-%.3f", r.K, r.mean_speed, r.std_speed, r.mean_gap, r.std_gap)


def cmd_scenario(args, cfg: Config):
    e = cfg.eval
    start, end = (11.0, 13.0) if args.kind == "accel" else (13.0, 11.0)
    spec = ScenarioSpec(start, end, ramp_start=e.ramp_start, ramp_duration=e.ramp_duration,
                        initial_gap=e.initial_gap, duration=e.duration)
    if args.policy:
        controller = load_model(_require(args.policy, "policy"), "policy")
    else:
        controller = IdmParams()
    trace = leader_follower(spec, controller, cfg.ring.dt, stage_rng(cfg.seed, "scenario"), cfg.bounds)
    meta = {"kind": args.kind, "controller": "policy" if args.policy else "idm", "collided": trace.collided}
    export_results(trace, args.out, meta=meta)
    write_manifest(args.out, cfg, "scenario", [args.policy] if args.policy else [])
    if trace.collided:
        log.warning("follower collided with the leader")


def _write_curve(path, columns, rows):
    lines = ["\t".join(columns)] + ["\t".join(repr(float(x)) for x in r) for r in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="master seed (beats the config file and RINGFLOW_SEED)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="ringflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("collect", parents=[common], help="simulate IDM ground truth")
    s.add_argument("--runs", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("train-gen", parents=[common], help="train the scene generator")
    s.add_argument("--data")
    s.add_argument("--out", default="generator.bin")
    s.add_argument("--curve")
    s.set_defaults(func=cmd_train_gen)

    s = sub.add_parser("train-policy", parents=[common], help="train the shared driving policy")
    s.add_argument("--data")
    s.add_argument("--gen")
    s.add_argument("--out", default="policy.bin")
    s.add_argument("--curve")
    s.set_defaults(func=cmd_train_policy)

    s = sub.add_parser("eval", parents=[common], help="K-sweep macroscopic alignment")
    s.add_argument("--data")
    s.add_argument("--policy")
    s.add_argument("--gen")
    s.add_argument("--k", help="hidden counts, e.g. 1..4")
    s.add_argument("--rollouts", type=int)
    s.add_argument("--out", default="alignment.tsv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("scenario", parents=[common], help="leader-follower run")
    s.add_argument("--kind", choices=("accel", "decel"), default="accel")
    s.add_argument("--policy", help="policy model; IDM follower when omitted")
    s.add_argument("--out", default="scenario.tsv")
    s.set_defaults(func=cmd_scenario)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set)
        if args.command == "collect":
            if args.runs is not None:
                overrides.append(f"collect.runs={args.runs}")
            if args.steps is not None:
                overrides.append(f"collect.steps={args.steps}")
        cfg = load_config(args.config, overrides, seed=args.seed)
        args.func(args, cfg)
    except ConfigError as exc:
        where = f" (key: {exc.key})" if exc.key else ""
        print(f"ringflow: config error: {exc}{where}", file=sys.stderr)
        return 2
    except (UsageError, ModelFormatError) as exc:
        print(f"ringflow: {exc}", file=sys.stderr)
        return 2
    except (RingflowError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"ringflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
