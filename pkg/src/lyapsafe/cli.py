"""Command-line entry point: ``lyapsafe {train,eval,gridworld,plotdata,attention,configs}``.

Exit codes: 0 success, 2 invalid input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import LyapsafeError, NumericError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _cmd_train(args) -> int:
    from .harness import run_experiment

    def progress(label, seed, summary):
        where = f"{label} " if label else ""
        print(f"{where}seed {seed}: mean return {summary['mean_return']:.2f}, mean constraint cost "
              f"{summary['mean_constraint']:.3f}, safety rate {summary['safety_rate']:.3f}", flush=True)

    root = run_experiment(args.config, args.set, args.out, progress)
    print(root)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import evaluate

    report = evaluate(args.checkpoint, n=args.episodes, seed=args.seed)
    if args.out:
        report.to_json(args.out)
    summary = {k: v for k, v in asdict(report).items() if k not in ("returns", "constraints")}
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_gridworld_gen(args) -> int:
    from .gridworld import GridSpec, generate, render, save_map
    from .nn.rng import RngStream

    spec = GridSpec(width=args.width, height=args.height, density=args.density, noise=args.noise,
                    obs_mode=args.obs_mode, dynamic=args.n_dynamic > 0, n_dynamic=args.n_dynamic,
                    episode_cap=args.episode_cap)
    state = generate(spec, RngStream(args.seed, "gridworld/map"))
    save_map(spec, state, args.out)
    print(render(spec, state))
    return EXIT_OK


def _cmd_plotdata(args) -> int:
    from .harness import emit_plot_data

    files = []
    for p in map(Path, args.metrics):
        files.extend(sorted(p.rglob("metrics.csv")) if p.is_dir() else [p])
    print(emit_plot_data(files, args.out, args.window))
    return EXIT_OK


def _cmd_attention(args) -> int:
    from .harness import dump_checkpoint_attention

    print(dump_checkpoint_attention(args.checkpoint, args.scenario, args.out))
    return EXIT_OK


def _cmd_configs(args) -> int:
    from .harness import reference_config_names, reference_config_path

    for name in reference_config_names():
        print(f"{name}\t{reference_config_path(name)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapsafe", description="Safe Q-iteration experiments on grid worlds")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config, then evaluate and dump attention")
    t.add_argument("--config", required=True, help="YAML file or shipped reference config name")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    t.add_argument("--out", default=None, help="output root (default: the config's out_dir)")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None, help="write the full report as JSON")
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gridworld", help="grid-world utilities")
    gsub = g.add_subparsers(dest="gridworld_command", required=True)
    gen = gsub.add_parser("gen", help="generate a map file")
    gen.add_argument("--width", type=int, default=4)
    gen.add_argument("--height", type=int, default=4)
    gen.add_argument("--density", type=float, default=0.0)
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--obs-mode", default="discrete", choices=("discrete", "image", "partial"))
    gen.add_argument("--n-dynamic", type=int, default=0)
    gen.add_argument("--episode-cap", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gridworld_gen)

    pd = sub.add_parser("plotdata", help="smoothed tidy CSV from metrics files or run directories")
    pd.add_argument("metrics", nargs="+")
    pd.add_argument("--window", type=int, default=20)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=_cmd_plotdata)

    a = sub.add_parser("attention", help="dump attention weights along a scenario trajectory")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--scenario", required=True)
    a.add_argument("--out", default="attention.csv")
    a.set_defaults(func=_cmd_attention)

    c = sub.add_parser("configs", help="list shipped reference configs")
    c.set_defaults(func=_cmd_configs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LyapsafeError, OSError) as err:
        for line in getattr(err, "problems", None) or [str(err)]:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
