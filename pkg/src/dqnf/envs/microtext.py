"""MicroText: a small deterministic text game with a verb x object action space.

The game definition (rooms, objects, quest chain, vocabulary) lives in a JSON
document; see ``docs/microtext_schema.md``. Actions are every ``verb object``
pair plus ``go <direction>``. Commands that do not fit the situation ("take
key" when no key is in sight) are rejected and leave the world untouched.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .base import ActionRangeError, EnvSpec, EpisodeDoneError, FeedbackStep

DEFAULT_GAME = Path(__file__).resolve().parent.parent / "data" / "microtext.json"
INVENTORY = "inventory"
# tokens produced by the engine itself rather than read from the game file
ENGINE_TOKENS = ("welcome", "you", "go", "the", "exits", "inside", "is", "locked", "closed",
                 "empty", "open")


class GameDefinitionError(ValueError):
    pass


@dataclass(frozen=True)
class GameObject:
    name: str
    description: tuple[str, ...]
    placements: tuple[str, ...]
    portable: bool = False
    container: bool = False
    openable: bool = False
    lockable: bool = False
    key: str | None = None
    guards: tuple[str, str] | None = None   # (room, direction) this object blocks while closed


@dataclass
class Game:
    start_room: str
    goal_room: str
    max_steps: int
    verbs: tuple[str, ...]
    directions: tuple[str, ...]
    rooms: dict[str, dict[str, Any]]
    objects: tuple[GameObject, ...]
    quest: tuple[tuple[str, str], ...]
    vocabulary: tuple[str, ...]

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Game":
        rooms = {r["name"]: {"description": tuple(r["description"].split()),
                             "exits": dict(r.get("exits", {}))} for r in doc["rooms"]}
        objects = []
        for o in doc["objects"]:
            placements = o.get("placements") or [o["room"]]
            guards = o.get("guards")
            objects.append(GameObject(
                name=o["name"], description=tuple(o.get("description", o["name"]).split()),
                placements=tuple(placements), portable=bool(o.get("portable", False)),
                container=bool(o.get("container", False)), openable=bool(o.get("openable", False)),
                lockable=bool(o.get("lockable", False)), key=o.get("key"),
                guards=(guards["room"], guards["direction"]) if guards else None))
        quest = tuple((q["verb"], q.get("object") or q.get("room")) for q in doc["quest"])
        game = cls(doc["start_room"], doc["goal_room"], int(doc.get("max_steps", 100)),
                   tuple(doc["verbs"]), tuple(doc["directions"]), rooms, tuple(objects), quest,
                   tuple(doc["vocabulary"]))
        game.validate()
        return game

    @classmethod
    def load(cls, path: str | Path = DEFAULT_GAME) -> "Game":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise GameDefinitionError("duplicate vocabulary tokens")
        if len(self.vocabulary) > 64:
            raise GameDefinitionError("vocabulary exceeds 64 tokens")
        names = {o.name for o in self.objects}
        containers = {o.name for o in self.objects if o.container}
        needed = set(ENGINE_TOKENS) | set(self.verbs) | set(self.directions) | names | set(self.rooms)
        for r in self.rooms.values():
            needed |= set(r["description"])
            for d, dest in r["exits"].items():
                if d not in self.directions or dest not in self.rooms:
                    raise GameDefinitionError(f"bad exit {d} -> {dest}")
        for o in self.objects:
            needed |= set(o.description)
            for p in o.placements:
                if p not in self.rooms and p not in containers:
                    raise GameDefinitionError(f"object {o.name}: unknown placement {p}")
            if o.key is not None and o.key not in names:
                raise GameDefinitionError(f"object {o.name}: unknown key {o.key}")
        missing = needed - set(self.vocabulary)
        if missing:
            raise GameDefinitionError(f"tokens missing from vocabulary: {sorted(missing)}")
        if self.start_room not in self.rooms or self.goal_room not in self.rooms:
            raise GameDefinitionError("unknown start or goal room")
        for room, info in self.rooms.items():
            if room != self.goal_room and not any(
                    self._guard(room, d) is None for d in info["exits"]):
                raise GameDefinitionError(f"room {room} has no unguarded exit")

    def _guard(self, room: str, direction: str) -> GameObject | None:
        for o in self.objects:
            if o.guards == (room, direction):
                return o
        return None

    @property
    def actions(self) -> list[tuple[str, str]]:
        acts = [(v, o.name) for v in self.verbs for o in self.objects]
        return acts + [("go", d) for d in self.directions]


@dataclass
class MicroTextState:
    room: str
    location: dict[str, str]          # object -> room name, INVENTORY, or container name
    is_open: dict[str, bool]
    locked: dict[str, bool]
    progress: int = 0
    steps: int = 0
    message: tuple[str, ...] = ("welcome",)
    done: bool = False

    def copy(self) -> "MicroTextState":
        return MicroTextState(self.room, dict(self.location), dict(self.is_open), dict(self.locked),
                              self.progress, self.steps, self.message, self.done)

    def world(self) -> tuple:
        """Comparable view of everything except the step counter."""
        return (self.room, tuple(sorted(self.location.items())), tuple(sorted(self.is_open.items())),
                tuple(sorted(self.locked.items())), self.progress, self.message)


class MicroText:
    def __init__(self, game: Game | None = None, max_steps: int | None = None, gamma: float = 0.99):
        self.game = game or Game.load()
        self.objects = {o.name: o for o in self.game.objects}
        self.actions = self.game.actions
        self.vocab_index = {t: i for i, t in enumerate(self.game.vocabulary)}
        self.spec = EnvSpec(len(self.actions), (3 * len(self.game.vocabulary),),
                            max_steps or self.game.max_steps, gamma)
        self.state: MicroTextState | None = None
        self.total_rejections = 0

    @property
    def n_actions(self) -> int:
        return self.spec.action_count

    def action_name(self, action: int) -> str:
        return " ".join(self.actions[action])

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        location = {}
        # containers first so contents can be placed inside them
        for o in sorted(self.game.objects, key=lambda o: not o.container):
            location[o.name] = o.placements[int(rng.integers(len(o.placements)))]
        is_open = {o.name: False for o in self.game.objects if o.openable}
        locked = {o.name: True for o in self.game.objects if o.lockable}
        self.state = MicroTextState(self.game.start_room, location, is_open, locked)
        return self.observation()

    # -- world queries ---------------------------------------------------
    def _reachable(self, state: MicroTextState, name: str) -> bool:
        """On the floor of the current room or inside an open container there."""
        place = state.location[name]
        if place == state.room:
            return True
        if place in self.objects and self.objects[place].container:
            return state.is_open.get(place, False) and self._reachable(state, place)
        return False

    def _visible(self, state: MicroTextState, name: str) -> bool:
        return state.location[name] == INVENTORY or self._reachable(state, name)

    def _exit_blocker(self, state: MicroTextState, direction: str) -> GameObject | None:
        guard = self.game._guard(state.room, direction)
        if guard is not None and not state.is_open.get(guard.name, False):
            return guard
        return None

    def is_valid(self, state: MicroTextState, action: int) -> bool:
        verb, target = self.actions[action]
        if verb == "go":
            return (target in self.game.rooms[state.room]["exits"]
                    and self._exit_blocker(state, target) is None)
        obj = self.objects[target]
        if verb == "take":
            return obj.portable and state.location[target] != INVENTORY and self._reachable(state, target)
        if verb == "drop":
            return state.location[target] == INVENTORY
        if verb == "open":
            return (obj.openable and self._reachable(state, target) and not state.is_open[target]
                    and not state.locked.get(target, False))
        if verb == "close":
            return obj.openable and self._reachable(state, target) and state.is_open[target]
        if verb == "unlock":
            return (obj.lockable and self._reachable(state, target) and state.locked[target]
                    and obj.key is not None and state.location[obj.key] == INVENTORY)
        if verb == "examine":
            return self._visible(state, target)
        return False

    def valid_actions(self, state: MicroTextState | None = None) -> frozenset[int]:
        """Ground-truth accepted actions. For tests and oracles only."""
        state = state or self.state
        return frozenset(a for a in range(self.n_actions) if self.is_valid(state, a))

    # -- dynamics --------------------------------------------------------
    def step(self, action: int) -> FeedbackStep:
        state = self.state
        if state is None or state.done:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        if not 0 <= action < self.n_actions:
            raise ActionRangeError(f"action {action} outside [0, {self.n_actions})")
        state.steps += 1
        timeout = state.steps >= self.spec.max_steps
        if not self.is_valid(state, action):
            self.total_rejections += 1
            state.done = timeout
            return FeedbackStep(self.observation(), 0.0, timeout, 1, truncated=timeout)
        verb, target = self.actions[action]
        self._apply(state, verb, target)
        self._advance_quest(state, verb, target)
        if state.room == self.game.goal_room:
            state.done = True
            return FeedbackStep(self.observation(), 1.0, True, 0)
        state.done = timeout
        return FeedbackStep(self.observation(), 0.0, timeout, 0, truncated=timeout)

    def _apply(self, state: MicroTextState, verb: str, target: str) -> None:
        if verb == "go":
            state.room = self.game.rooms[state.room]["exits"][target]
            state.message = ("you", "go", target)
        elif verb == "take":
            state.location[target] = INVENTORY
            state.message = ("you", "take", "the", target)
        elif verb == "drop":
            state.location[target] = state.room
            state.message = ("you", "drop", "the", target)
        elif verb == "open":
            state.is_open[target] = True
            msg = ("you", "open", "the", target)
            if self.objects[target].container:
                contents = self._contents(state, target)
                msg += ("inside", "is", *contents) if contents else ("is", "empty")
            state.message = msg
        elif verb == "close":
            state.is_open[target] = False
            state.message = ("you", "close", "the", target)
        elif verb == "unlock":
            state.locked[target] = False
            state.message = ("you", "unlock", "the", target)
        elif verb == "examine":
            state.message = self.objects[target].description

    def _advance_quest(self, state: MicroTextState, verb: str, target: str) -> None:
        if state.progress >= len(self.game.quest):
            return
        want_verb, want_target = self.game.quest[state.progress]
        happened = (verb, target) == (want_verb, want_target) or (
            want_verb == "enter" and verb == "go" and state.room == want_target)
        if happened:
            state.progress += 1

    def _contents(self, state: MicroTextState, container: str) -> list[str]:
        return [o.name for o in self.game.objects if state.location[o.name] == container]

    # -- observation -----------------------------------------------------
    def room_text(self, state: MicroTextState) -> list[str]:
        info = self.game.rooms[state.room]
        words = [state.room, *info["description"]]
        for o in self.game.objects:
            if state.location[o.name] != state.room:
                continue
            words.append(o.name)
            if o.lockable and state.locked.get(o.name):
                words.append("locked")
            elif o.openable:
                words.append("open" if state.is_open[o.name] else "closed")
            if o.container and state.is_open[o.name]:
                contents = self._contents(state, o.name)
                words += ["inside", *contents] if contents else ["empty"]
        words += ["exits", *sorted(info["exits"])]
        return words

    def inventory_text(self, state: MicroTextState) -> list[str]:
        return [o.name for o in self.game.objects if state.location[o.name] == INVENTORY]

    def bag_of_words(self, words: list[str] | tuple[str, ...]) -> np.ndarray:
        v = np.zeros(len(self.vocab_index), dtype=np.float32)
        for w in words:
            v[self.vocab_index[w]] += 1.0
        return v

    def observation(self, state: MicroTextState | None = None) -> np.ndarray:
        return encode_text_observation(self, state or self.state)

    def snapshot(self) -> MicroTextState | None:
        return None if self.state is None else self.state.copy()

    def restore(self, state: MicroTextState) -> None:
        self.state = state.copy()


def encode_text_observation(env: MicroText, state: MicroTextState) -> np.ndarray:
    """[last-action message | room description | inventory] bag-of-words counts."""
    return np.concatenate([env.bag_of_words(state.message), env.bag_of_words(env.room_text(state)),
                           env.bag_of_words(env.inventory_text(state))])


def oracle_valid_set(env: MicroText, state: MicroTextState | None = None) -> frozenset[int]:
    return env.valid_actions(state)
