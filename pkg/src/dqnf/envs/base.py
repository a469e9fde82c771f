from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ActionRangeError(ValueError):
    """Action index outside the action space (a caller bug, not a rejection)."""


class EpisodeDoneError(RuntimeError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    action_count: int
    observation_shape: tuple[int, ...]
    max_steps: int
    gamma: float = 0.99

    def __post_init__(self) -> None:
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class FeedbackStep:
    """Result of one MDP-F transition.

    ``feedback`` is 1 when the environment rejected the action; the world is
    then left untouched and ``reward`` is 0. ``truncated`` marks an episode
    ended by the step cap rather than by reaching the goal.
    """

    observation: np.ndarray
    reward: float
    done: bool
    feedback: int
    truncated: bool = False

    @property
    def terminal(self) -> bool:
        return self.done and not self.truncated
