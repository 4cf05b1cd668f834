"""Command-line entry point: ``ocra <stage> [options]``.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.
The artifact root is ``--data-dir``, else ``$OCRA_DATA_DIR``, else
``./ocra_data``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import PipelineConfig, config_from_dict, load_config
from .errors import ConfigError, OcraError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p, default):
    p.add_argument("--config", default=default,
                   help="pipeline config (JSON); defaults are used when omitted")
    p.add_argument("--data-dir", default=default,
                   help="artifact root (default: $OCRA_DATA_DIR or ./ocra_data)")
    p.add_argument("--seed", type=int, default=default, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1 if default is None else default,
                   help="worker threads for per-demo work")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ocra", description="Object-centric demonstration-to-robot pipeline "
                                         "on synthetic ground truth.")
    _add_common(p, None)
    # the same options are accepted after the subcommand; there they only
    # override when actually given
    common = _Parser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        return sub.add_parser(name, parents=[common], help=help)

    s = command("synth", help="render a synthetic demonstration dataset")
    s.add_argument("--scene", choices=["stack", "sort"])
    s.add_argument("--n-demos", type=int)

    r = command("reconstruct", help="metric scale + two-view fusion into per-frame PLY")
    r.add_argument("--scale-mode", choices=["per_sequence", "global"])

    command("track", help="ICP object tracking over the fused clouds")

    t = command("train", help="train the diffusion policy")
    t.add_argument("--steps", type=int)
    t.add_argument("--horizon", type=int, choices=[4, 8])
    t.add_argument("--obs-horizon", type=int)
    t.add_argument("--force-dims", type=int, choices=[0, 1, 3])
    t.add_argument("--lr", type=float)
    t.add_argument("--fusion", choices=["resfilm", "frozen", "none"])

    ro = command("rollout", help="closed-loop rollouts of the trained policy")
    ro.add_argument("--n-rollouts", type=int)

    e = command("eval", help="score rollout logs against ground truth")
    e.add_argument("--log", help="rollout log (JSON lines)")
    e.add_argument("--ground-truth", help="ground-truth poses JSON")

    pl = command("plot", help="SVG figures and CSV data")
    pl.add_argument("--log", help="rollout log (JSON lines)")
    pl.add_argument("--losses", help="training loss CSV")
    pl.add_argument("--ground-truth", help="ground-truth poses JSON")
    pl.add_argument("--out", help="output directory")

    command("run", help="synth -> reconstruct -> track -> train -> rollout -> eval -> plot")
    command("config", help="print the effective configuration as JSON")
    return p


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    cmd = args.command
    if cmd == "synth":
        upd = {k: v for k, v in (("scene", args.scene), ("n_demos", args.n_demos)) if v is not None}
        cfg = replace(cfg, synth=replace(cfg.synth, **upd))
    elif cmd == "reconstruct" and args.scale_mode:
        cfg = replace(cfg, reconstruct=replace(cfg.reconstruct, scale_mode=args.scale_mode))
    elif cmd == "train":
        upd = {k: v for k, v in (("steps", args.steps), ("horizon", args.horizon),
                                 ("obs_horizon", args.obs_horizon), ("force_dims", args.force_dims),
                                 ("lr", args.lr), ("fusion", args.fusion)) if v is not None}
        cfg = replace(cfg, policy=replace(cfg.policy, **upd))
    elif cmd == "rollout" and args.n_rollouts is not None:
        cfg = replace(cfg, rollout=replace(cfg.rollout, n_rollouts=args.n_rollouts))
    # re-validate through the schema so overrides get the same checks as the file
    return config_from_dict(cfg.to_dict())


def data_root(args) -> Path:
    return Path(args.data_dir or os.environ.get("OCRA_DATA_DIR") or "ocra_data")


def _report(stage: str, info: dict):
    print(json.dumps({"stage": stage, **info}, sort_keys=True, default=str))


def run_command(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = _apply_overrides(cfg, args)
    root = data_root(args)
    cmd = args.command
    if cmd == "config":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    stages = pipeline.STAGES if cmd == "run" else (cmd,)
    for stage in stages:
        if stage == "synth":
            info = pipeline.run_synth(cfg, root)
        elif stage == "reconstruct":
            info = pipeline.run_reconstruct(cfg, root, jobs=args.jobs)
        elif stage == "track":
            info = pipeline.run_track(cfg, root, jobs=args.jobs)
        elif stage == "train":
            info = pipeline.run_train(cfg, root)
        elif stage == "rollout":
            info = pipeline.run_rollout(cfg, root)
        elif stage == "eval":
            info = pipeline.run_eval(cfg, root, getattr(args, "log", None), getattr(args, "ground_truth", None))
        else:
            info = pipeline.run_plot(cfg, root, getattr(args, "log", None), getattr(args, "losses", None),
                                     getattr(args, "ground_truth", None), getattr(args, "out", None))
        _report(stage, info)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        return run_command(args)
    except OcraError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": e.exit_code}),
              file=sys.stderr)
        return e.exit_code


def main_exit():
    """Console-script wrapper: exit with :func:`main`'s status."""
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
