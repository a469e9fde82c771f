"""GridRooms: navigation gridworld whose background colour selects the valid actions.

Map files hold one character per cell: ``#`` wall, ``.`` floor (room type 0),
``G`` goal, and digits ``0..k-1`` for floor cells of that room type.

The 3k actions come in groups of three. In a cell of room type ``j`` only
``3j`` (turn left), ``3j+1`` (turn right) and ``3j+2`` (forward) are accepted;
every other index is rejected by the environment.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base import ActionRangeError, EnvSpec, EpisodeDoneError, FeedbackStep, LayoutError

VIEW = 7
N_FRAMES = 3
# direction index -> (drow, dcol): east, south, west, north
DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))
TURN_LEFT, TURN_RIGHT, FORWARD = 0, 1, 2
MAPS_DIR = Path(__file__).resolve().parent.parent / "data" / "maps"


@dataclass
class GridLayout:
    walls: np.ndarray   # bool (H, W)
    rooms: np.ndarray   # int (H, W); -1 on walls and the goal
    goal: tuple[int, int]
    k: int

    @classmethod
    def from_text(cls, text: str, k: int | None = None) -> "GridLayout":
        rows = [line.rstrip() for line in text.splitlines() if line.strip()]
        if not rows:
            raise LayoutError("empty map")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise LayoutError("map rows have unequal length")
        walls = np.zeros((len(rows), width), dtype=bool)
        rooms = np.full((len(rows), width), -1, dtype=np.int64)
        goals = []
        for r, line in enumerate(rows):
            for c, ch in enumerate(line):
                if ch == "#":
                    walls[r, c] = True
                elif ch == "G":
                    goals.append((r, c))
                elif ch == ".":
                    rooms[r, c] = 0
                elif ch.isdigit():
                    rooms[r, c] = int(ch)
                else:
                    raise LayoutError(f"unknown map character {ch!r} at row {r}, col {c}")
        if len(goals) != 1:
            raise LayoutError(f"map needs exactly one goal cell, found {len(goals)}")
        used = int(rooms.max()) + 1 if (rooms >= 0).any() else 0
        k = used if k is None else k
        if k < 1 or used > k:
            raise LayoutError(f"room types 0..{used - 1} do not fit k={k}")
        return cls(walls, rooms, goals[0], k)

    @classmethod
    def from_file(cls, path: str | Path, k: int | None = None) -> "GridLayout":
        return cls.from_text(Path(path).read_text(), k)

    @classmethod
    def builtin(cls, name: str, k: int | None = None) -> "GridLayout":
        return cls.from_file(MAPS_DIR / f"{name}.txt", k)

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    def free_cells(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(self.rooms >= 0))]

    def passable(self, r: int, c: int) -> bool:
        h, w = self.walls.shape
        return 0 <= r < h and 0 <= c < w and not self.walls[r, c]


def load_layout(source: str | Path, k: int | None = None) -> GridLayout:
    """Path to a map file, or the name of a bundled map (``rooms8``, ``rooms5``)."""
    path = Path(source)
    if path.is_file():
        return GridLayout.from_file(path, k)
    if (MAPS_DIR / f"{source}.txt").is_file():
        return GridLayout.builtin(str(source), k)
    raise FileNotFoundError(f"map {source!r} not found")


@dataclass
class GridRoomsState:
    pos: tuple[int, int]
    direction: int
    steps: int = 0
    frames: list[np.ndarray] = field(default_factory=list)
    done: bool = False


def move(layout: GridLayout, pos: tuple[int, int], direction: int, nav: int) -> tuple[tuple[int, int], int]:
    """Deterministic navigation dynamics for one accepted action."""
    if nav == TURN_LEFT:
        return pos, (direction - 1) % 4
    if nav == TURN_RIGHT:
        return pos, (direction + 1) % 4
    dr, dc = DIRECTIONS[direction]
    nxt = (pos[0] + dr, pos[1] + dc)
    return (nxt if layout.passable(*nxt) else pos), direction


class GridRooms:
    """MDP-F gridworld. Single-owner and mutable; all randomness comes from ``reset(seed)``."""

    def __init__(self, layout: GridLayout, max_steps: int = 200, gamma: float = 0.99):
        self.layout = layout
        self.k = layout.k
        self.channels_per_frame = 3 + self.k + 1
        self.spec = EnvSpec(3 * self.k, (N_FRAMES * self.channels_per_frame, VIEW, VIEW),
                            max_steps, gamma)
        self.starts = layout.free_cells()
        if not self.starts:
            raise LayoutError("layout has no free cell to start from")
        self._check_reachability()
        self._features = self._cell_features()
        self._views: dict[tuple[int, int, int], np.ndarray] = {}
        self.state: GridRoomsState | None = None
        self.total_rejections = 0

    @property
    def n_actions(self) -> int:
        return self.spec.action_count

    def _check_reachability(self) -> None:
        # navigation is always available through the room's own action group,
        # so valid-action reachability reduces to grid connectivity
        seen = {self.layout.goal}
        queue = deque([self.layout.goal])
        while queue:
            r, c = queue.popleft()
            for dr, dc in DIRECTIONS:
                nxt = (r + dr, c + dc)
                if nxt not in seen and self.layout.passable(*nxt):
                    seen.add(nxt)
                    queue.append(nxt)
        stranded = [cell for cell in self.starts if cell not in seen]
        if stranded:
            raise LayoutError(f"cells {stranded} cannot reach the goal")

    def _cell_features(self) -> np.ndarray:
        """Per-cell feature vector (without the orientation plane), padded with walls."""
        h, w = self.layout.shape
        pad = VIEW
        feats = np.zeros((h + 2 * pad, w + 2 * pad, 3 + self.k), dtype=np.float32)
        feats[..., 0] = 1.0
        for r in range(h):
            for c in range(w):
                f = feats[r + pad, c + pad]
                f[0] = 0.0
                if self.layout.walls[r, c]:
                    f[0] = 1.0
                elif (r, c) == self.layout.goal:
                    f[1] = 1.0
                else:
                    f[2] = 1.0
                    f[3 + self.layout.rooms[r, c]] = 1.0
        return feats

    def view(self, pos: tuple[int, int], direction: int) -> np.ndarray:
        """Egocentric 7x7 frame, shape (3 + k + 1, 7, 7).

        The agent sits at the bottom-centre cell (row 6, col 3) looking towards
        row 0. Cells outside the grid read as walls. The last plane holds the
        absolute heading, direction / 3.
        """
        key = (pos[0], pos[1], direction)
        frame = self._views.get(key)
        if frame is None:
            fr, fc = DIRECTIONS[direction]
            rr, rc = DIRECTIONS[(direction + 1) % 4]
            ahead = (VIEW - 1) - np.arange(VIEW)[:, None]
            lateral = np.arange(VIEW)[None, :] - VIEW // 2
            rows = pos[0] + ahead * fr + lateral * rr + VIEW
            cols = pos[1] + ahead * fc + lateral * rc + VIEW
            cells = self._features[rows, cols]  # (7, 7, 3 + k)
            frame = np.empty((self.channels_per_frame, VIEW, VIEW), dtype=np.float32)
            frame[:-1] = cells.transpose(2, 0, 1)
            frame[-1] = direction / 3.0
            frame.setflags(write=False)
            self._views[key] = frame
        return frame

    def reset(self, seed: int | None = None, start: tuple[tuple[int, int], int] | None = None) -> np.ndarray:
        if start is None:
            rng = np.random.default_rng(seed)
            pos = self.starts[int(rng.integers(len(self.starts)))]
            direction = int(rng.integers(4))
        else:
            pos, direction = tuple(start[0]), int(start[1])
            if pos not in self.starts:
                raise LayoutError(f"start cell {pos} is not a free cell")
        first = self.view(pos, direction)
        self.state = GridRoomsState(pos, direction, 0, [first] * N_FRAMES)
        return self.observation()

    def observation(self, state: GridRoomsState | None = None) -> np.ndarray:
        state = state or self.state
        return encode_observation(state)

    def room_type(self, state: GridRoomsState | None = None) -> int:
        state = state or self.state
        return int(self.layout.rooms[state.pos])

    def valid_actions(self, state: GridRoomsState | None = None) -> frozenset[int]:
        """Ground-truth accepted actions. For tests and oracles only."""
        j = self.room_type(state)
        return frozenset((3 * j, 3 * j + 1, 3 * j + 2))

    def step(self, action: int) -> FeedbackStep:
        state = self.state
        if state is None or state.done:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        if not 0 <= action < self.n_actions:
            raise ActionRangeError(f"action {action} outside [0, {self.n_actions})")
        state.steps += 1
        timeout = state.steps >= self.spec.max_steps
        j = self.room_type(state)
        if action // 3 != j:
            self.total_rejections += 1
            state.done = timeout
            return FeedbackStep(self.observation(), 0.0, timeout, 1, truncated=timeout)
        state.pos, state.direction = move(self.layout, state.pos, state.direction, action % 3)
        state.frames = state.frames[1:] + [self.view(state.pos, state.direction)]
        if state.pos == self.layout.goal:
            state.done = True
            return FeedbackStep(self.observation(), 1.0, True, 0)
        state.done = timeout
        return FeedbackStep(self.observation(), 0.0, timeout, 0, truncated=timeout)

    def snapshot(self) -> GridRoomsState:
        s = self.state
        return None if s is None else GridRoomsState(s.pos, s.direction, s.steps, list(s.frames), s.done)

    def restore(self, state: GridRoomsState) -> None:
        self.state = GridRoomsState(state.pos, state.direction, state.steps, list(state.frames),
                                    state.done)


def encode_observation(state: GridRoomsState) -> np.ndarray:
    """Stack the last three frames along channels, oldest first."""
    return np.concatenate(state.frames, axis=0)


def oracle_valid_set(env: GridRooms, state: GridRoomsState | None = None) -> frozenset[int]:
    return env.valid_actions(state)


def make_gridrooms(map_source: str | Path = "rooms8", k: int | None = None,
                   max_steps: int = 200, gamma: float = 0.99) -> GridRooms:
    return GridRooms(load_layout(map_source, k), max_steps, gamma)
