"""Seeded training runs: config loading, the episode loop, metrics CSV and manifests."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .. import nn
from ..agent import AgentConfig, DQNAgent
from ..envs import GridRooms, MicroText, load_layout
from ..envs.microtext import DEFAULT_GAME, Game
from ..frontier import FrontierConfig

log = logging.getLogger(__name__)

CSV_HEADER = ("episode", "env_steps", "return", "success", "forbidden_count", "dqn_loss",
              "frontier_loss", "classifier_acc", "epsilon", "lr")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: dict[str, Any]
    agent: AgentConfig
    frontier: FrontierConfig | None
    total_steps: int
    seeds: list[int]
    output_dir: str
    precision: str = "float32"
    network: dict[str, Any] = field(default_factory=dict)
    success_window: float = 0.1
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.env.get("name") not in ("gridrooms", "microtext"):
            raise ConfigError(f"unknown environment {self.env.get('name')!r}")
        if not 0.0 < self.success_window <= 1.0:
            raise ConfigError("success_window must lie in (0, 1]")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: str | Path | None = None) -> "RunConfig":
        try:
            env = dict(d["env"])
            base = Path(base_dir) if base_dir else Path.cwd()
            for key in ("map", "game"):
                if key in env:
                    env[key] = _resolve_file(env[key], base, key)
            frontier = d.get("frontier")
            if frontier in (None, "disabled", False):
                frontier_cfg = None
            else:
                frontier_cfg = FrontierConfig(**frontier)
            out = Path(d.get("output_dir", "runs"))
            if not out.is_absolute():
                out = base / out
            return cls(env=env, agent=AgentConfig.from_dict(d.get("agent", {})),
                       frontier=frontier_cfg, total_steps=int(d["total_steps"]),
                       seeds=[int(s) for s in d["seeds"]], output_dir=str(out),
                       precision=d.get("precision", "float32"), network=dict(d.get("network", {})),
                       success_window=float(d.get("success_window", 0.1)),
                       workers=int(d.get("workers", 1)))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict[str, Any]:
        return {
            "env": dict(self.env),
            "agent": self.agent.to_dict(),
            "frontier": self.frontier.to_dict() if self.frontier else "disabled",
            "total_steps": self.total_steps,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "precision": self.precision,
            "network": dict(self.network),
            "success_window": self.success_window,
            "workers": self.workers,
        }


def _resolve_file(value: str, base: Path, key: str) -> str:
    if key == "map":
        try:
            candidate = Path(value) if Path(value).is_absolute() else base / value
            if candidate.is_file():
                return str(candidate.resolve())
            load_layout(value)  # bundled map name
            return value
        except FileNotFoundError as exc:
            raise ConfigError(f"map file {value!r} does not exist") from exc
    candidate = Path(value) if Path(value).is_absolute() else base / value
    if not candidate.is_file():
        raise ConfigError(f"{key} file {value!r} does not exist")
    return str(candidate.resolve())


def make_env(env_cfg: dict[str, Any]) -> GridRooms | MicroText:
    name = env_cfg["name"]
    gamma = float(env_cfg.get("gamma", 0.99))
    if name == "gridrooms":
        layout = load_layout(env_cfg.get("map", "rooms8"), env_cfg.get("k"))
        return GridRooms(layout, int(env_cfg.get("max_steps", 200)), gamma)
    if name == "microtext":
        game = Game.load(env_cfg.get("game", DEFAULT_GAME))
        return MicroText(game, env_cfg.get("max_steps"), gamma)
    raise ConfigError(f"unknown environment {name!r}")


def build_specs(env: GridRooms | MicroText, network: dict[str, Any] | None = None) -> list[nn.LayerSpec]:
    network = network or {}
    if isinstance(env, GridRooms):
        return nn.conv_chain(env.spec.observation_shape[0], env.n_actions,
                             channels=tuple(network.get("channels", (16, 32, 64))),
                             kernel=int(network.get("kernel", 2)), pool=int(network.get("pool", 2)),
                             hidden=int(network.get("hidden", 64)))
    return nn.mlp_chain(env.spec.observation_shape[0], env.n_actions,
                        hidden=tuple(network.get("hidden", (64, 64))))


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def build_agent(config: RunConfig, env, seed: int) -> DQNAgent:
    specs = build_specs(env, config.network)
    return DQNAgent(specs, env.spec.observation_shape, config.agent, seed, config.total_steps,
                    config.frontier, config.dtype)


def _fmt(x: float) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "nan" if math.isnan(x) else f"{float(x):.10g}"


@dataclass
class SeedResult:
    seed: int
    status: str
    run_dir: str
    summary: dict[str, Any]


def train(config: RunConfig, seed: int, *, env=None, on_episode=None) -> tuple[DQNAgent, Any, list[dict]]:
    """Run one seed in memory. Returns (agent, env, metric rows)."""
    env = env if env is not None else make_env(config.env)
    agent = build_agent(config, env, seed)
    rows: list[dict] = []
    episode = 0
    while agent.env_steps < config.total_steps:
        obs = env.reset(episode_seed(seed, episode))
        ret, forbidden, done, success = 0.0, 0, False, False
        dqn_losses, f_losses, accs = [], [], []
        while not done and agent.env_steps < config.total_steps:
            action = agent.act(obs)
            step = env.step(action)
            report = agent.observe(obs, action, step)
            if report is not None:
                dqn_losses.append(report.dqn_loss)
                f_losses.append(report.frontier_loss)
                if not math.isnan(report.classifier_acc):
                    accs.append(report.classifier_acc)
            ret += step.reward
            forbidden += step.feedback
            success = success or (step.done and step.reward > 0)
            done = step.done
            obs = step.observation
        row = {
            "episode": episode,
            "env_steps": agent.env_steps,
            "return": ret,
            "success": int(success),
            "forbidden_count": forbidden,
            "dqn_loss": float(np.mean(dqn_losses)) if dqn_losses else float("nan"),
            "frontier_loss": float(np.mean(f_losses)) if (f_losses and agent.classifier) else float("nan"),
            "classifier_acc": float(np.mean(accs)) if accs else float("nan"),
            "epsilon": agent.epsilon,
            "lr": agent.lr,
        }
        rows.append(row)
        if on_episode is not None:
            on_episode(row)
        episode += 1
    return agent, env, rows


def write_metrics(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in CSV_HEADER])


def final_window_success(rows: list[dict], total_steps: int, fraction: float = 0.1) -> float:
    start = (1.0 - fraction) * total_steps
    window = [r["success"] for r in rows if r["env_steps"] > start]
    return float(np.mean(window)) if window else float("nan")


def run_seed(config: RunConfig, seed: int) -> SeedResult:
    run_dir = Path(config.output_dir) / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows: list[dict] = []
    status, error = "ok", None
    env = make_env(config.env)
    agent = None
    try:
        agent, env, rows = train(config, seed, env=env, on_episode=None)
    except nn.DivergenceError as exc:
        status, error = "diverged", str(exc)
        log.error("seed %d diverged: %s", seed, exc)
    wall = time.perf_counter() - t0
    write_metrics(run_dir / "metrics.csv", rows)
    if agent is not None:
        doc = {"env": config.env, "network": config.network, "precision": config.precision,
               **agent.checkpoint_doc()}
        (run_dir / "checkpoint.json").write_text(json.dumps(doc))
    summary = {
        "episodes": len(rows),
        "env_steps": rows[-1]["env_steps"] if rows else 0,
        "total_forbidden": int(sum(r["forbidden_count"] for r in rows)),
        "env_rejections": int(env.total_rejections),
        "final_window_success": final_window_success(rows, config.total_steps, config.success_window),
    }
    manifest = {"config": config.to_dict(), "seed": seed, "status": status, "error": error,
                "wall_clock_s": wall, "summary": summary,
                "files": {"metrics": "metrics.csv", "checkpoint": "checkpoint.json" if agent else None}}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return SeedResult(seed, status, str(run_dir), summary)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _run_seed_args(args):
    config_doc, seed = args
    return run_seed(RunConfig.from_dict(config_doc), seed)


def run_experiment(config: RunConfig, seeds: list[int] | None = None) -> list[SeedResult]:
    """Train every seed; workers (if > 1) are independent processes."""
    seeds = list(seeds if seeds is not None else config.seeds)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    workers = max(1, min(config.workers, len(seeds), os.cpu_count() or 1))
    if workers == 1:
        return [run_seed(config, s) for s in seeds]
    doc = config.to_dict()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_args, [(doc, s) for s in seeds]))


def load_manifest_config(path: str | Path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text())["config"])


def load_agent_checkpoint(path: str | Path) -> tuple[dict, nn.Network, Any]:
    """Rebuild (checkpoint doc, online network, environment) from a run checkpoint."""
    doc = json.loads(Path(path).read_text())
    specs, params = nn.load_checkpoint_doc(doc["online"])
    return doc, nn.Network(specs, params), make_env(doc["env"])
