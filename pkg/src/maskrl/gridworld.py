"""Deterministic, fully observable gridworld tasks with an applicability oracle.

Five bundled tasks cover the Maze, X-Island and Key & Door domains. States are
immutable :class:`EnvState` values and the transition function is pure, so the
whole state space of a task can be enumerated and checked exhaustively.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from importlib import resources

import numpy as np


class Cell(IntEnum):
    WALL = 0
    FLOOR = 1
    WATER = 2
    GOAL = 3
    KEY = 4
    DOOR = 5


CHAR_TO_CELL = {
    "#": Cell.WALL,
    ".": Cell.FLOOR,
    " ": Cell.FLOOR,
    "~": Cell.WATER,
    "G": Cell.GOAL,
    "K": Cell.KEY,
    "D": Cell.DOOR,
}

MOVE_ACTIONS = ("up", "right", "down", "left")
KEYDOOR_ACTIONS = MOVE_ACTIONS + ("pickup", "open")

MOVES = {
    "up": (-1, 0),
    "right": (0, 1),
    "down": (1, 0),
    "left": (0, -1),
}

CHANNELS = (
    "wall",
    "floor",
    "agent",
    "goal",
    "key_present",
    "door_closed",
    "door_open",
    "has_key",
)
N_CHANNELS = len(CHANNELS)

TASKS = {
    "maze": "maze.txt",
    "xisland1": "xisland1.txt",
    "xisland2": "xisland2.txt",
    "doorkey1": "doorkey1.txt",
    "doorkey2": "doorkey2.txt",
}

MAX_ENUMERATION = 10**6


class LayoutError(ValueError):
    """Malformed ASCII layout."""


class ConfigurationError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    """Raised when stepping a state that is already terminal."""


class EnumerationLimitError(RuntimeError):
    def __init__(self, count: int, limit: int):
        super().__init__(f"state space has {count} candidate states, limit is {limit}")
        self.count = count
        self.limit = limit


@dataclass(frozen=True)
class Layout:
    name: str
    cells: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def positions(self, kind: Cell) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.cells == kind)
        return [(int(r), int(c)) for r, c in zip(rows, cols)]

    def find(self, kind: Cell) -> tuple[int, int] | None:
        found = self.positions(kind)
        return found[0] if found else None

    @property
    def goal(self) -> tuple[int, int]:
        return self.find(Cell.GOAL)

    @property
    def key(self) -> tuple[int, int] | None:
        return self.find(Cell.KEY)

    @property
    def door(self) -> tuple[int, int] | None:
        return self.find(Cell.DOOR)

    @property
    def has_key_door(self) -> bool:
        return self.door is not None

    def __getitem__(self, pos: tuple[int, int]) -> Cell:
        return Cell(int(self.cells[pos]))

    def to_text(self) -> str:
        inverse = {Cell.WALL: "#", Cell.FLOOR: ".", Cell.WATER: "~",
                   Cell.GOAL: "G", Cell.KEY: "K", Cell.DOOR: "D"}
        return "\n".join("".join(inverse[Cell(int(v))] for v in row) for row in self.cells)


def parse_layout(text: str, name: str = "") -> Layout:
    """Parse an ASCII map into a :class:`Layout`.

    ``#`` wall, ``.`` or space floor, ``~`` water, ``G`` goal, ``K`` key,
    ``D`` closed door. Errors carry 1-based line/column positions.
    """
    lines = text.splitlines()
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise LayoutError("empty layout")
    width = len(lines[0])
    grid = np.empty((len(lines), width), dtype=np.int8)
    for r, line in enumerate(lines):
        if len(line) != width:
            raise LayoutError(f"line {r + 1}: length {len(line)} differs from {width}")
        for c, ch in enumerate(line):
            if ch not in CHAR_TO_CELL:
                raise LayoutError(f"line {r + 1}, column {c + 1}: unknown character {ch!r}")
            grid[r, c] = CHAR_TO_CELL[ch]

    h, w = grid.shape
    for r in range(h):
        for c in range(w):
            on_border = r in (0, h - 1) or c in (0, w - 1)
            if on_border and grid[r, c] != Cell.WALL:
                raise LayoutError(f"line {r + 1}, column {c + 1}: border cell is not a wall")

    def _count(kind: Cell) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(grid == kind)
        return [(int(a) + 1, int(b) + 1) for a, b in zip(rows, cols)]

    goals = _count(Cell.GOAL)
    if not goals:
        raise LayoutError("layout has no goal cell")
    if len(goals) > 1:
        r, c = goals[1]
        raise LayoutError(f"line {r}, column {c}: duplicate goal cell")
    for kind, label in ((Cell.KEY, "key"), (Cell.DOOR, "door")):
        found = _count(kind)
        if len(found) > 1:
            r, c = found[1]
            raise LayoutError(f"line {r}, column {c}: duplicate {label} cell")
    if bool(_count(Cell.KEY)) != bool(_count(Cell.DOOR)):
        raise LayoutError("key and door must appear together")
    return Layout(name=name, cells=grid)


def load_layout(task: str) -> Layout:
    """Load one of the bundled layouts by task name (``maze``, ``doorkey1``, ...)."""
    try:
        filename = TASKS[task]
    except KeyError:
        raise ConfigurationError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None
    text = resources.files("maskrl.layouts").joinpath(filename).read_text(encoding="utf-8")
    return parse_layout(text, name=task)


@dataclass(frozen=True)
class EnvState:
    agent_pos: tuple[int, int]
    has_key: bool = False
    door_open: bool = False
    steps_elapsed: int = 0

    @property
    def key(self) -> tuple[tuple[int, int], bool, bool]:
        """The state with the clock dropped; what applicability compares."""
        return (self.agent_pos, self.has_key, self.door_open)


@dataclass(frozen=True)
class EnvSpec:
    layout: Layout
    action_set: tuple[str, ...]
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]")
        expected = KEYDOOR_ACTIONS if self.layout.has_key_door else MOVE_ACTIONS
        if tuple(self.action_set) != expected:
            raise ConfigurationError(f"action set must be {expected}")

    @property
    def n_actions(self) -> int:
        return len(self.action_set)

    @property
    def name(self) -> str:
        return self.layout.name

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (N_CHANNELS, self.layout.height, self.layout.width)

    def action_index(self, name: str) -> int:
        return self.action_set.index(name)


def make_spec(layout: Layout, horizon: int | None = None, gamma: float = 0.99) -> EnvSpec:
    actions = KEYDOOR_ACTIONS if layout.has_key_door else MOVE_ACTIONS
    if horizon is None:
        horizon = 4 * layout.width * layout.height
    return EnvSpec(layout=layout, action_set=actions, horizon=horizon, gamma=gamma)


def make_task(task: str, horizon: int | None = None, gamma: float = 0.99) -> EnvSpec:
    return make_spec(load_layout(task), horizon=horizon, gamma=gamma)


def start_cells(spec: EnvSpec) -> list[tuple[int, int]]:
    return spec.layout.positions(Cell.FLOOR)


def reset(spec: EnvSpec, rng_seed: int | np.random.Generator) -> tuple[EnvState, np.ndarray]:
    """Draw an initial state uniformly over floor cells."""
    cells = start_cells(spec)
    if not cells:
        raise ConfigurationError(f"layout {spec.name!r} has no eligible start cell")
    rng = np.random.default_rng(rng_seed) if not isinstance(rng_seed, np.random.Generator) else rng_seed
    pos = cells[int(rng.integers(len(cells)))]
    state = EnvState(agent_pos=pos)
    return state, observe(spec, state)


def is_goal(spec: EnvSpec, state: EnvState) -> bool:
    return state.agent_pos == spec.layout.goal


def is_terminal(spec: EnvSpec, state: EnvState) -> bool:
    return is_goal(spec, state) or state.steps_elapsed >= spec.horizon


def _passable(spec: EnvSpec, pos: tuple[int, int], door_open: bool) -> bool:
    cell = spec.layout[pos]
    if cell in (Cell.WALL, Cell.WATER):
        return False
    if cell == Cell.DOOR:
        return door_open
    return True


def _adjacent(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def transition(spec: EnvSpec, state: EnvState, action: int) -> EnvState:
    """Effect of ``action`` on (position, key, door), ignoring the clock."""
    name = spec.action_set[action]
    if name in MOVES:
        dr, dc = MOVES[name]
        target = (state.agent_pos[0] + dr, state.agent_pos[1] + dc)
        if _passable(spec, target, state.door_open):
            return replace(state, agent_pos=target)
        return state
    if name == "pickup":
        if not state.has_key and state.agent_pos == spec.layout.key:
            return replace(state, has_key=True)
        return state
    if name == "open":
        door = spec.layout.door
        if state.has_key and not state.door_open and _adjacent(state.agent_pos, door):
            return replace(state, door_open=True)
        return state
    raise ValueError(f"unknown action {name!r}")


def step(spec: EnvSpec, state: EnvState, action: int) -> tuple[EnvState, float, bool, np.ndarray]:
    if not 0 <= action < spec.n_actions:
        raise ValueError(f"action index {action} out of range for {spec.n_actions} actions")
    if is_terminal(spec, state):
        raise EpisodeDoneError("step called on a terminal state; reset first")
    moved = transition(spec, state, action)
    t = state.steps_elapsed + 1
    nxt = replace(moved, steps_elapsed=t)
    reward = 0.0
    if is_goal(spec, nxt):
        # elapsed steps before the goal-reaching move
        reward = 1.0 - 0.9 * (state.steps_elapsed / spec.horizon)
    done = is_terminal(spec, nxt)
    return nxt, reward, done, observe(spec, nxt)


def is_applicable(spec: EnvSpec, state: EnvState, action: int) -> bool:
    """True iff ``action`` changes position, key or door status."""
    return transition(spec, state, action).key != state.key


def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    layout = spec.layout
    cells = layout.cells
    obs = np.zeros((N_CHANNELS,) + cells.shape, dtype=np.float32)
    obs[0] = cells == Cell.WALL
    obs[1] = (cells == Cell.FLOOR) | (cells == Cell.KEY)
    obs[2][state.agent_pos] = 1.0
    obs[3] = cells == Cell.GOAL
    if layout.key is not None and not state.has_key:
        obs[4][layout.key] = 1.0
    if layout.door is not None:
        obs[6 if state.door_open else 5][layout.door] = 1.0
    if state.has_key:
        obs[7] = 1.0
    return obs


def decode_observation(spec: EnvSpec, obs: np.ndarray) -> EnvState:
    """Inverse of :func:`observe` (up to the clock)."""
    flat = int(np.argmax(obs[2]))
    pos = divmod(flat, spec.layout.width)
    door_open = bool(obs[6].any())
    has_key = bool(obs[7].flat[0] > 0.5)
    return EnvState(agent_pos=(int(pos[0]), int(pos[1])), has_key=has_key, door_open=door_open)


def _flag_contexts(spec: EnvSpec) -> list[tuple[bool, bool]]:
    if spec.layout.has_key_door:
        return [(False, False), (True, False), (True, True), (False, True)]
    return [(False, False)]


def enumerate_states(spec: EnvSpec, limit: int = MAX_ENUMERATION) -> list[EnvState]:
    """All non-terminal states reachable from the start distribution.

    Goal states are terminal and excluded; ``steps_elapsed`` is fixed to 0.
    Order is deterministic (breadth-first from the sorted start cells).
    """
    occupiable = int(np.isin(spec.layout.cells, (Cell.FLOOR, Cell.KEY, Cell.DOOR, Cell.GOAL)).sum())
    candidates = occupiable * len(_flag_contexts(spec))
    if candidates > limit:
        raise EnumerationLimitError(candidates, limit)
    seen: dict[tuple, EnvState] = {}
    queue: deque[EnvState] = deque()
    for pos in start_cells(spec):
        s = EnvState(agent_pos=pos)
        if s.key not in seen:
            seen[s.key] = s
            queue.append(s)
    while queue:
        s = queue.popleft()
        for a in range(spec.n_actions):
            nxt = transition(spec, s, a)
            if nxt.key in seen or is_goal(spec, nxt):
                continue
            seen[nxt.key] = nxt
            queue.append(nxt)
    return list(seen.values())


def applicability_table(spec: EnvSpec, states: list[EnvState] | None = None) -> np.ndarray:
    """Boolean ``(n_states, n_actions)`` ground-truth applicability."""
    if states is None:
        states = enumerate_states(spec)
    return np.array([[is_applicable(spec, s, a) for a in range(spec.n_actions)] for s in states],
                    dtype=bool)


def pruned_fraction(spec: EnvSpec) -> float:
    table = applicability_table(spec)
    return float(1.0 - table.mean())


def shortest_path_length(spec: EnvSpec, state: EnvState) -> int | None:
    """Fewest actions from ``state`` to the goal, or ``None`` if unreachable."""
    start = replace(state, steps_elapsed=0)
    if is_goal(spec, start):
        return 0
    dist = {start.key: 0}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        d = dist[s.key]
        for a in range(spec.n_actions):
            nxt = transition(spec, s, a)
            if nxt.key in dist:
                continue
            if is_goal(spec, nxt):
                return d + 1
            dist[nxt.key] = d + 1
            queue.append(nxt)
    return None


def max_return(spec: EnvSpec, state: EnvState) -> float:
    """Best achievable undiscounted return from ``state`` at time 0."""
    d = shortest_path_length(spec, state)
    if d is None or d > spec.horizon:
        return 0.0
    return 1.0 - 0.9 * (d - 1) / spec.horizon


class GridEnv:
    """Stateful wrapper exposing the usual reset/step loop plus ``is_applicable``.

    Each instance owns its random generator; instances share nothing.
    """

    def __init__(self, spec: EnvSpec, seed: int | None = None):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None
        self.done = True

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    def reset(self) -> np.ndarray:
        self.state, obs = reset(self.spec, self.rng)
        self.done = False
        return obs

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        if self.state is None:
            raise EpisodeDoneError("reset must be called before step")
        prev = self.state
        self.state, reward, self.done, obs = step(self.spec, prev, action)
        info = {"applicable": prev.key != self.state.key}
        return obs, reward, self.done, info

    def is_applicable(self, action: int) -> bool:
        return is_applicable(self.spec, self.state, action)
