from .base import ActionRangeError, EnvSpec, EpisodeDoneError, FeedbackStep, LayoutError
from .gridrooms import GridLayout, GridRooms, GridRoomsState, load_layout, make_gridrooms
from .microtext import Game, MicroText, MicroTextState

__all__ = [
    "ActionRangeError", "EnvSpec", "EpisodeDoneError", "FeedbackStep", "LayoutError",
    "GridLayout", "GridRooms", "GridRoomsState", "load_layout", "make_gridrooms",
    "Game", "MicroText", "MicroTextState",
]
