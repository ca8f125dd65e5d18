"""Command-line entry point ``olrl``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, ParseError

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


def _load(path):
    from .bench import ExperimentConfig

    return ExperimentConfig.from_json(path)


def cmd_run(args) -> int:
    from .bench import run_experiment

    cfg = _load(args.config)
    if args.out:
        cfg.output_dir = args.out
    summary = run_experiment(cfg)
    for variant, s in summary.items():
        print(f"{variant}: final score {s['mean']:.2f} +- {s['std']:.2f} over {s['n_seeds']} seeds")
    return EXIT_OK


def cmd_eval_dynamics(args) -> int:
    from .bench import eval_dynamics

    cfg = _load(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = eval_dynamics(cfg, out_path=out / "dynamics.csv")
    for h in (1, 10, cfg.horizon):
        if h <= cfg.horizon:
            i = h - 1
            print(f"h={h}: model {res['model_agent'][i]:.3f} px, "
                  f"constant velocity {res['const_vel_agent'][i]:.3f} px (agent)")
    print(f"wrote {out / 'dynamics.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .bench import render_report

    for p in render_report(args.inp):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_dump_frames(args) -> int:
    from .envsim import EnvConfig, dump_frames

    try:
        with open(args.config) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    env = EnvConfig.from_dict(d["env"] if "env" in d else d)
    if args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    out = args.out or "frames"
    written = dump_frames(env, args.steps, out)
    print(f"wrote {len(written)} frames to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="olrl", description="Object-level RL on a synthetic tabletop")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run agent variants over seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval-dynamics", help="position error vs rollout horizon")
    e.add_argument("--config", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval_dynamics)

    rep = sub.add_parser("report", help="render SVG plots from a run directory")
    rep.add_argument("--in", dest="inp", required=True)
    rep.set_defaults(fn=cmd_report)

    d = sub.add_parser("dump-frames", help="write RGB and 16-bit depth PNGs of a random rollout")
    d.add_argument("--config", required=True)
    d.add_argument("--steps", type=int, required=True)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_dump_frames)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
