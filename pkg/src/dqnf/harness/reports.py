"""Metric aggregation across seeds, plot-data files and Q-value separation reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .. import nn
from ..agent import select_action
from .runner import CSV_HEADER

# derived series; "success_rate" is a trailing mean of the success flag
SERIES = ("success_rate", "forbidden_cumulative", "forbidden_count", "return", "dqn_loss",
          "frontier_loss", "classifier_acc", "epsilon", "lr")
RATE_SERIES = ("success_rate", "classifier_acc")
SUCCESS_WINDOW_EPISODES = 20


class MetricsError(ValueError):
    pass


def load_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise MetricsError(f"{path}: unexpected metrics header {header}")
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(CSV_HEADER))
    return {name: data[:, i] for i, name in enumerate(CSV_HEADER)}


def find_metric_files(paths: Iterable[str | Path]) -> list[Path]:
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_file():
            files.append(p)
        else:
            found = sorted(p.rglob("metrics.csv"))
            if not found:
                raise MetricsError(f"no metrics.csv under {p}")
            files += found
    return files


def _episode_series(m: dict[str, np.ndarray], metric: str) -> np.ndarray:
    if metric == "success_rate":
        s = m["success"]
        c = np.concatenate([[0.0], np.cumsum(s)])
        idx = np.arange(1, len(s) + 1)
        lo = np.maximum(0, idx - SUCCESS_WINDOW_EPISODES)
        return (c[idx] - c[lo]) / (idx - lo)
    if metric == "forbidden_cumulative":
        return np.cumsum(m["forbidden_count"])
    return m[metric]


def series_on_grid(m: dict[str, np.ndarray], metric: str, grid: np.ndarray) -> np.ndarray:
    """Value of the most recent episode finished at or before each grid step.

    Grid points before the first episode end take 0 for counts and rates and
    the first finite value otherwise.
    """
    if metric not in SERIES:
        raise MetricsError(f"unknown metric {metric!r}; valid metrics: {', '.join(SERIES)}")
    values = _episode_series(m, metric).astype(np.float64)
    steps = m["env_steps"]
    if metric not in ("success_rate", "forbidden_cumulative", "forbidden_count"):
        # carry the last finite value forward over episodes without updates
        finite = np.isfinite(values)
        if finite.any():
            idx = np.where(finite, np.arange(len(values)), -1)
            idx = np.maximum.accumulate(idx)
            first = values[finite][0]
            values = np.where(idx >= 0, values[np.maximum(idx, 0)], first)
        else:
            values = np.zeros_like(values)
        before = values[0] if len(values) else 0.0
    else:
        before = 0.0
    pos = np.searchsorted(steps, grid, side="right") - 1
    return np.where(pos >= 0, values[np.maximum(pos, 0)] if len(values) else before, before)


@dataclass
class Aggregate:
    metric: str
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_seeds: int


def aggregate(files: Sequence[str | Path], metric: str, stride: int = 1000) -> Aggregate:
    """Mean and one-standard-deviation band over seeds on a common env-step grid."""
    if len(files) < 2:
        raise MetricsError("need at least two seeds to estimate a standard deviation")
    runs = [load_metrics(f) for f in files]
    if any(len(r["env_steps"]) == 0 for r in runs):
        raise MetricsError("empty metrics file")
    end = int(min(r["env_steps"][-1] for r in runs))
    grid = np.arange(0, end + 1, stride, dtype=np.int64)
    values = np.stack([series_on_grid(r, metric, grid) for r in runs])
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1)
    lower, upper = mean - std, mean + std
    if metric in RATE_SERIES:
        lower, upper = np.clip(lower, 0.0, 1.0), np.clip(upper, 0.0, 1.0)
    return Aggregate(metric, grid, mean, std, lower, upper, len(runs))


def emit_plot_data(files: Sequence[str | Path], metric: str, out_path: str | Path,
                   stride: int = 1000) -> Aggregate:
    """Whitespace-separated ``env_steps mean lower upper std`` rows, one per grid point."""
    agg = aggregate(files, metric, stride)
    with open(out_path, "w") as fh:
        fh.write(f"# metric={metric} seeds={agg.n_seeds}\n# env_steps mean lower upper std\n")
        for row in zip(agg.grid, agg.mean, agg.lower, agg.upper, agg.std):
            fh.write(f"{int(row[0])} {row[1]:.8g} {row[2]:.8g} {row[3]:.8g} {row[4]:.8g}\n")
    return agg


def final_window_success(m: dict[str, np.ndarray], total_steps: int | None = None,
                         fraction: float = 0.1) -> float:
    total = total_steps or float(m["env_steps"][-1])
    mask = m["env_steps"] > (1.0 - fraction) * total
    return float(m["success"][mask].mean()) if mask.any() else float("nan")


@dataclass
class Comparison:
    grid: np.ndarray
    series: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    final_success: dict[str, list[float]] = field(default_factory=dict)
    forbidden_total: dict[str, list[float]] = field(default_factory=dict)

    def summary_lines(self) -> list[str]:
        lines = []
        for side in ("A", "B"):
            fs, ft = np.array(self.final_success[side]), np.array(self.forbidden_total[side])
            lines.append(f"{side}: final-window success {fs.mean():.3f} ± {fs.std(ddof=1):.3f}  "
                         f"cumulative forbidden {ft.mean():.1f} ± {ft.std(ddof=1):.1f}  (n={len(fs)})")
        for metric, d in self.series.items():
            lines.append(f"{metric}: final A {d['mean_A'][-1]:.4g} ± {d['std_A'][-1]:.3g} | "
                         f"B {d['mean_B'][-1]:.4g} ± {d['std_B'][-1]:.3g} | "
                         f"max |A-B| {np.max(np.abs(d['diff'])):.4g}")
        return lines


def compare_runs(dir_a: str | Path | Sequence[Path], dir_b: str | Path | Sequence[Path],
                 stride: int = 1000, metrics: Sequence[str] = SERIES,
                 window: float = 0.1) -> Comparison:
    files_a = find_metric_files([dir_a] if isinstance(dir_a, (str, Path)) else dir_a)
    files_b = find_metric_files([dir_b] if isinstance(dir_b, (str, Path)) else dir_b)
    if len(files_a) < 2 or len(files_b) < 2:
        raise MetricsError("compare needs at least two seeds per side")
    runs = {"A": [load_metrics(f) for f in files_a], "B": [load_metrics(f) for f in files_b]}
    end = int(min(r["env_steps"][-1] for side in runs.values() for r in side))
    grid = np.arange(0, end + 1, stride, dtype=np.int64)
    out = Comparison(grid)
    for metric in metrics:
        entry: dict[str, np.ndarray] = {}
        for side, rs in runs.items():
            vals = np.stack([series_on_grid(r, metric, grid) for r in rs])
            entry[f"mean_{side}"] = vals.mean(axis=0)
            entry[f"std_{side}"] = vals.std(axis=0, ddof=1)
        entry["diff"] = entry["mean_A"] - entry["mean_B"]
        out.series[metric] = entry
    for side, rs in runs.items():
        out.final_success[side] = [final_window_success(r, fraction=window) for r in rs]
        out.forbidden_total[side] = [float(r["forbidden_count"].sum()) for r in rs]
    return out


@dataclass
class SeparationReport:
    rows: list[dict[str, Any]]
    fraction: float

    def margins(self) -> np.ndarray:
        return np.array([r["margin"] for r in self.rows])

    def dump(self, path: str | Path) -> None:
        """One line per state: index, min valid Q, max forbidden Q, margin, then the Q-vector."""
        with open(path, "w") as fh:
            fh.write("# state min_valid max_forbidden margin q...\n")
            for r in self.rows:
                qs = " ".join(f"{q:.6g}" for q in r["q"])
                fh.write(f"{r['state']} {r['min_valid']:.6g} {r['max_forbidden']:.6g} "
                         f"{r['margin']:.6g} {qs}\n")


def q_separation_report(qnet: nn.Network, env, n_states: int, seed: int = 0,
                        epsilon: float = 0.05) -> SeparationReport:
    """Share of on-policy states whose every rejected action scores below every valid one.

    States are gathered from epsilon-greedy rollouts of ``qnet``. The valid set
    comes from the environment's ground truth; this is an evaluation tool.
    """
    rng = np.random.default_rng(seed)
    rows: list[dict[str, Any]] = []
    episode = 0
    while len(rows) < n_states:
        obs = env.reset(int(rng.integers(2**31)))
        done = False
        while not done and len(rows) < n_states:
            q = qnet(obs[None])[0].astype(np.float64)
            valid = sorted(env.valid_actions())
            forbidden = [a for a in range(len(q)) if a not in valid]
            min_valid = float(q[valid].min())
            max_forbidden = float(q[forbidden].max()) if forbidden else float("-inf")
            rows.append({"state": len(rows), "episode": episode, "q": q.tolist(),
                         "min_valid": min_valid, "max_forbidden": max_forbidden,
                         "margin": min_valid - max_forbidden,
                         "separated": bool(max_forbidden < min_valid)})
            action = select_action(qnet, obs, epsilon, rng)
            step = env.step(action)
            done, obs = step.done, step.observation
        episode += 1
    fraction = float(np.mean([r["separated"] for r in rows]))
    return SeparationReport(rows, fraction)


def holdout_classifier_accuracy(classifier: nn.Network, qnet: nn.Network, env, n_samples: int,
                                seed: int = 0, epsilon: float = 0.05) -> float:
    """Taken-action validity accuracy on fresh transitions never seen in training.

    States come from epsilon-greedy rollouts of ``qnet``; the probed action
    is drawn uniformly from the whole action set, so most probes are
    rejections. The label is the feedback bit the environment returns.
    """
    rng = np.random.default_rng(seed)
    correct = 0
    taken = 0
    obs = env.reset(int(rng.integers(2**31)))
    while taken < n_samples:
        saved = env.snapshot()
        probe = int(rng.integers(env.n_actions))
        feedback = env.step(probe).feedback
        env.restore(saved)
        p = classifier(obs[None])[0, probe]
        correct += int((p > 0.5) == (feedback == 0))
        taken += 1
        step = env.step(select_action(qnet, obs, epsilon, rng))
        obs = step.observation
        if step.done:
            obs = env.reset(int(rng.integers(2**31)))
    return correct / taken
