"""Command-line entry point: ``dqnf <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 a training run diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import nn
from ..agent import select_action
from ..envs.gridrooms import GridRooms
from . import oracle, reports
from .runner import ConfigError, RunConfig, episode_seed, load_agent_checkpoint, make_env, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _load_env_file(path: str):
    """An env file is either a run config (its ``env`` block is used) or a bare env block."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read env file {path}: {exc}") from exc
    block = doc.get("env", doc)
    base = Path(path).parent
    for key in ("map", "game"):
        if key in block and not Path(block[key]).is_absolute() and (base / block[key]).is_file():
            block[key] = str((base / block[key]).resolve())
    return make_env(block)


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    seeds = [args.seed] if args.seed is not None else config.seeds
    results = run_experiment(config, seeds)
    for r in results:
        print(f"seed {r.seed}: {r.status}  episodes={r.summary['episodes']}  "
              f"forbidden={r.summary['total_forbidden']}  "
              f"final_success={r.summary['final_window_success']:.3f}  -> {r.run_dir}")
    return EXIT_DIVERGED if any(r.status != "ok" for r in results) else EXIT_OK


def cmd_eval(args) -> int:
    _, qnet, env = load_agent_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    successes, forbidden, lengths = 0, 0, []
    for ep in range(args.episodes):
        obs = env.reset(episode_seed(args.seed, ep))
        done, t = False, 0
        while not done:
            step = env.step(select_action(qnet, obs, args.epsilon, rng))
            forbidden += step.feedback
            done, obs, t = step.done, step.observation, t + 1
        successes += int(step.reward > 0)
        lengths.append(t)
    print(f"episodes={args.episodes} success_rate={successes / args.episodes:.3f} "
          f"forbidden_per_episode={forbidden / args.episodes:.2f} mean_length={np.mean(lengths):.1f}")
    return EXIT_OK


def cmd_inspect_q(args) -> int:
    _, qnet, ckpt_env = load_agent_checkpoint(args.checkpoint)
    env = _load_env_file(args.env) if args.env else ckpt_env
    rep = reports.q_separation_report(qnet, env, args.states, args.seed)
    margins = rep.margins()
    print(f"states={len(rep.rows)} separated_fraction={rep.fraction:.3f} "
          f"margin mean={margins.mean():.4f} min={margins.min():.4f} max={margins.max():.4f}")
    if args.dump:
        rep.dump(args.dump)
        print(f"per-state Q dump written to {args.dump}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cmp = reports.compare_runs(args.dir_a, args.dir_b, stride=args.stride)
    for line in cmp.summary_lines():
        print(line)
    return EXIT_OK


def cmd_plot(args) -> int:
    files = reports.find_metric_files(args.dirs)
    out = Path(args.out or f"{args.metric}.dat")
    agg = reports.emit_plot_data(files, args.metric, out, stride=args.stride)
    print(f"{len(agg.grid)} rows over {agg.n_seeds} seeds written to {out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    env = _load_env_file(args.env)
    if not isinstance(env, GridRooms):
        raise ConfigError("the oracle supports GridRooms only")
    table = oracle.value_iteration_oracle(env)
    lengths = oracle.optimal_path_lengths(env)
    print(f"states={len(table.states)} sweeps={table.sweeps} "
          f"max_optimal_length={max(lengths.values())}")
    for (pos, d), length in sorted(lengths.items()):
        q = table.q(pos, d)
        print(f"cell={pos} heading={d} optimal_length={length} V*={q.max():.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dqnf", description="DQN with a frontier loss on rejected actions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="run only this seed")
    t.add_argument("--output-dir", help="override the config's output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--epsilon", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=12345)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("inspect-q", help="forbidden/valid Q-value separation on on-policy states")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--env", help="env or run config file (defaults to the checkpoint's env)")
    q.add_argument("--states", type=int, default=200)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--dump", help="write the per-state Q-vectors here")
    q.set_defaults(func=cmd_inspect_q)

    c = sub.add_parser("compare", help="mean and std over seeds for two run directories")
    c.add_argument("dir_a")
    c.add_argument("dir_b")
    c.add_argument("--stride", type=int, default=1000)
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="write whitespace-separated series for one metric")
    pl.add_argument("--metric", required=True)
    pl.add_argument("--stride", type=int, default=1000)
    pl.add_argument("--out")
    pl.add_argument("dirs", nargs="+")
    pl.set_defaults(func=cmd_plot)

    o = sub.add_parser("oracle", help="value iteration on a small GridRooms map")
    o.add_argument("--env", required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except nn.DivergenceError as exc:
        print(f"error: run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, reports.MetricsError, oracle.OracleRefusal, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
