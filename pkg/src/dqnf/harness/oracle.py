"""Tabular value-iteration oracle for small GridRooms maps.

The enumeration ignores the step counter and the frame history: the
navigation dynamics depend only on (position, heading).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..envs.gridrooms import DIRECTIONS, GridRooms, move, oracle_valid_set, GridRoomsState

MAX_ORACLE_STATES = 4096


class OracleRefusal(ValueError):
    pass


@dataclass
class QTable:
    states: list[tuple[tuple[int, int], int]]   # (cell, heading)
    values: np.ndarray                          # (n_states, n_actions)
    gamma: float
    sweeps: int

    def __post_init__(self) -> None:
        if self.values.shape[0] != len(self.states):
            raise ValueError("row count must match the state enumeration")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Q-table holds non-finite values")
        self.index = {s: i for i, s in enumerate(self.states)}

    def q(self, pos: tuple[int, int], direction: int) -> np.ndarray:
        return self.values[self.index[(tuple(pos), direction)]]

    def greedy(self, pos: tuple[int, int], direction: int) -> int:
        return int(np.argmax(self.q(pos, direction)))


def _state_valid_set(env: GridRooms, pos, direction) -> list[int]:
    return sorted(oracle_valid_set(env, GridRoomsState(pos, direction)))


def value_iteration_oracle(env: GridRooms, tol: float = 1e-10, max_states: int = MAX_ORACLE_STATES,
                           max_sweeps: int = 100_000) -> QTable:
    """Q* over valid actions by synchronous sweeps until the max residual drops below ``tol``.

    Forbidden entries are filled afterwards with the self-loop backup
    Q(s, a) = gamma * max_valid Q(s, .), since a rejected action leaves the
    state unchanged and pays nothing.
    """
    cells = env.starts
    n = 4 * len(cells)
    if n > max_states:
        raise OracleRefusal(f"{n} states exceed the oracle bound of {max_states}")
    gamma = env.spec.gamma
    states = [(cell, d) for cell in cells for d in range(4)]
    index = {s: i for i, s in enumerate(states)}
    n_actions = env.n_actions
    valid = [_state_valid_set(env, *s) for s in states]
    # successor table for valid actions: (next index or -1 for the goal, reward)
    succ: list[dict[int, tuple[int, float]]] = []
    for (pos, d), acts in zip(states, valid):
        row = {}
        for a in acts:
            npos, nd = move(env.layout, pos, d, a % 3)
            if npos == env.layout.goal:
                row[a] = (-1, 1.0)
            else:
                row[a] = (index[(npos, nd)], 0.0)
        succ.append(row)
    q = np.zeros((n, n_actions))
    sweeps = 0
    while True:
        v = np.array([q[i, acts].max() for i, acts in enumerate(valid)])
        new = q.copy()
        for i, row in enumerate(succ):
            for a, (j, r) in row.items():
                new[i, a] = r + (0.0 if j < 0 else gamma * v[j])
        residual = float(np.max(np.abs(new - q)))
        q = new
        sweeps += 1
        if residual < tol:
            break
        if sweeps >= max_sweeps:
            raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")
    for i, acts in enumerate(valid):
        best = q[i, acts].max()
        forbidden = [a for a in range(n_actions) if a not in acts]
        q[i, forbidden] = gamma * best
    return QTable(states, q, gamma, sweeps)


def optimal_path_lengths(env: GridRooms) -> dict[tuple[tuple[int, int], int], int]:
    """Fewest accepted actions from each (cell, heading) to the goal, by reverse BFS."""
    states = [(cell, d) for cell in env.starts for d in range(4)]
    preds: dict = {s: [] for s in states}
    dist: dict = {}
    frontier = deque()
    for s in states:
        for a in _state_valid_set(env, *s):
            npos, nd = move(env.layout, s[0], s[1], a % 3)
            if npos == env.layout.goal:
                if s not in dist:
                    dist[s] = 1
                    frontier.append(s)
            elif (npos, nd) != s:
                preds[(npos, nd)].append(s)
    while frontier:
        s = frontier.popleft()
        for p in preds[s]:
            if p not in dist:
                dist[p] = dist[s] + 1
                frontier.append(p)
    return dist


def greedy_path_length(policy, env: GridRooms, pos, direction, cap: int | None = None) -> int | None:
    """Steps a greedy ``policy(obs) -> action`` takes from a fixed start; None if it never arrives."""
    obs = env.reset(start=(pos, direction))
    cap = cap or env.spec.max_steps
    for t in range(1, cap + 1):
        step = env.step(policy(obs))
        if step.done:
            return t if step.reward > 0 else None
        obs = step.observation
    return None


def path_length_agreement(policy, env: GridRooms) -> tuple[float, list[tuple]]:
    """Share of (cell, heading) starts where the policy matches the optimal length, plus mismatches."""
    opt = optimal_path_lengths(env)
    mismatches = []
    for (pos, d), best in sorted(opt.items()):
        got = greedy_path_length(policy, env, pos, d)
        if got != best:
            mismatches.append(((pos, d), best, got))
    return 1.0 - len(mismatches) / len(opt), mismatches


def oracle_value_from_lengths(gamma: float, length: int) -> float:
    """Discounted goal reward after ``length`` accepted steps."""
    return gamma ** (length - 1)


__all__ = ["QTable", "OracleRefusal", "value_iteration_oracle", "optimal_path_lengths",
           "greedy_path_length", "path_length_agreement", "oracle_value_from_lengths", "DIRECTIONS"]
