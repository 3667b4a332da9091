"""Stochastic grid-world navigation with static and moving obstacles.

Cells are ``(row, col)`` with row 0 at the top; the flat index is
``row * width + col``. Actions are ``0 up, 1 down, 2 left, 3 right, 4 stay``.
Each step costs 1; reaching the goal also earns the goal reward, folded
into the cost as ``1 - reward``. Landing on (or ending the step co-located
with) an obstacle incurs constraint cost 1; obstacles can be passed through.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cmdp import CmdpModel
from .errors import GenerationError, ParameterError, SizeError, UnsupportedError, UsageError
from .nn.rng import RngStream

ACTION_NAMES = ("up", "down", "left", "right", "stay")
DISPLACEMENTS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)], dtype=int)
N_ACTIONS = 5
N_MOVES = 4
OBS_MODES = ("discrete", "image", "partial")


@dataclass(frozen=True)
class GridSpec:
    width: int = 4
    height: int = 4
    density: float = 0.0
    obstacles: tuple | None = None  # explicit static obstacle cells, overrides density
    start: tuple = (0, 0)
    goal: tuple | None = None  # default: bottom-right corner
    noise: float = 0.05
    dynamic: bool = False
    n_dynamic: int = 0
    dynamic_start: tuple | None = None  # explicit initial cells of moving obstacles
    obs_mode: str = "discrete"
    window: tuple = (5, 8)  # (lateral width, forward depth) of the partial view
    episode_cap: int = 100
    goal_reward: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        goal = (self.height - 1, self.width - 1) if self.goal is None else self.goal
        object.__setattr__(self, "goal", tuple(int(v) for v in goal))
        if self.obstacles is not None:
            object.__setattr__(self, "obstacles", tuple(sorted(tuple(int(v) for v in c) for c in self.obstacles)))
        if self.dynamic_start is not None:
            object.__setattr__(self, "dynamic_start", tuple(tuple(int(v) for v in c) for c in self.dynamic_start))
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ParameterError("grid dimensions must be positive")
        if not 0.0 <= self.density < 1.0:
            raise ParameterError("obstacle density must lie in [0, 1)")
        if not 0.0 <= self.noise < 1.0:
            raise ParameterError("noise probability must lie in [0, 1)")
        if self.obs_mode not in OBS_MODES:
            raise ParameterError(f"unknown observation mode {self.obs_mode!r}")
        if self.episode_cap < 1:
            raise ParameterError("episode cap must be positive")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise ParameterError(f"{name} cell {cell} is outside the grid")
        if self.start == self.goal:
            raise ParameterError("start and goal must differ")
        if self.obstacles is not None:
            for cell in self.obstacles:
                if not self.in_bounds(cell):
                    raise ParameterError(f"obstacle {cell} is outside the grid")
                if cell in (self.start, self.goal):
                    raise ParameterError("start and goal cannot be obstacles")
        if self.dynamic_start is not None:
            for cell in self.dynamic_start:
                if not self.in_bounds(cell):
                    raise ParameterError(f"moving obstacle {cell} is outside the grid")

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def index(self, cell) -> int:
        return int(cell[0]) * self.width + int(cell[1])

    def cell(self, index: int) -> tuple:
        return divmod(int(index), self.width)

    def obstacle_count(self) -> int:
        """Number of static obstacles implied by the density (half-up rounding)."""
        return int(math.floor(self.density * (self.n_cells - 2) + 0.5))

    def obs_shape(self) -> tuple:
        if self.obs_mode == "discrete":
            return (self.n_cells,)
        if self.obs_mode == "image":
            return (3, self.height, self.width)
        lateral, depth = self.window
        return (3, depth, lateral)


@dataclass
class GridState:
    agent: tuple
    static: frozenset
    moving: list
    steps: int = 0
    terminal: bool = False
    facing: int = 1  # last moved direction, down by default

    def obstacle_cells(self) -> set:
        return set(self.static) | set(self.moving)

    def copy(self) -> "GridState":
        return replace(self, moving=list(self.moving))


@dataclass
class StepResult:
    observation: np.ndarray
    cost: float
    constraint_cost: float
    reward_event: bool
    terminal: bool
    truncated: bool = False
    applied_action: int = 4
    noise: bool = False


def generate(spec: GridSpec, seed: int | RngStream) -> GridState:
    """Initial state with obstacles placed uniformly on non-start, non-goal cells."""
    rng = seed if isinstance(seed, RngStream) else RngStream(int(seed), "gridworld/map")
    reserved = {spec.start, spec.goal}
    if spec.obstacles is not None:
        static = frozenset(spec.obstacles)
    else:
        k = spec.obstacle_count()
        free = [spec.cell(i) for i in range(spec.n_cells) if spec.cell(i) not in reserved]
        if k > len(free):
            raise GenerationError(f"cannot place {k} obstacles on {len(free)} free cells")
        picks = rng.choice(len(free), size=k, replace=False) if k else []
        static = frozenset(free[int(i)] for i in picks)
    moving: list = []
    if spec.dynamic:
        if spec.dynamic_start is not None:
            moving = [tuple(c) for c in spec.dynamic_start]
        elif spec.n_dynamic:
            free = [spec.cell(i) for i in range(spec.n_cells) if spec.cell(i) not in reserved | static]
            if spec.n_dynamic > len(free):
                raise GenerationError(f"cannot place {spec.n_dynamic} moving obstacles on {len(free)} free cells")
            picks = rng.choice(len(free), size=spec.n_dynamic, replace=False)
            moving = [free[int(i)] for i in picks]
    return GridState(agent=spec.start, static=static, moving=moving)


def clamp_move(spec: GridSpec, cell, move: int) -> tuple:
    r, c = cell[0] + DISPLACEMENTS[move][0], cell[1] + DISPLACEMENTS[move][1]
    if not (0 <= r < spec.height and 0 <= c < spec.width):
        return tuple(cell)
    return (int(r), int(c))


def legal_neighbours(spec: GridSpec, cell) -> list:
    out = []
    for m in range(N_MOVES):
        r, c = cell[0] + DISPLACEMENTS[m][0], cell[1] + DISPLACEMENTS[m][1]
        if 0 <= r < spec.height and 0 <= c < spec.width:
            out.append((int(r), int(c)))
    return out


def move_obstacles(state: GridState, spec: GridSpec, rng: RngStream) -> GridState:
    """Each moving obstacle jumps to a uniformly chosen in-bounds neighbour."""
    if not spec.dynamic:
        raise UsageError("moving obstacles requested on a static grid")
    out = state.copy()
    moved = []
    for cell in state.moving:
        options = legal_neighbours(spec, cell)
        moved.append(options[int(rng.integers(len(options)))] if options else cell)
    out.moving = moved
    return out


def observe(state: GridState, spec: GridSpec) -> np.ndarray:
    """Observation array in the spec's mode (see :meth:`GridSpec.obs_shape`)."""
    if spec.obs_mode == "discrete":
        v = np.zeros(spec.n_cells)
        v[spec.index(state.agent)] = 1.0
        return v
    img = np.zeros((3, spec.height, spec.width))
    img[0][state.agent] = 1.0
    for cell in state.obstacle_cells():
        img[1][cell] = 1.0
    img[2][spec.goal] = 1.0
    if spec.obs_mode == "image":
        return img
    return _window(img, state, spec)


def _window(img: np.ndarray, state: GridState, spec: GridSpec) -> np.ndarray:
    # row k holds cells k steps ahead of the agent (k = 0 is the agent's own row);
    # column j is lateral offset j - lateral // 2, with the lateral axis rotating
    # with the facing direction so that facing down reproduces the map orientation
    lateral, depth = spec.window
    fr, fc = (int(v) for v in DISPLACEMENTS[state.facing])
    lat_r, lat_c = -fc, fr
    half = lateral // 2
    ar, ac = state.agent
    k = np.arange(depth)[:, None]
    j = np.arange(lateral)[None, :] - half
    rows = ar + k * fr + j * lat_r
    cols = ac + k * fc + j * lat_c
    inside = (rows >= 0) & (rows < spec.height) & (cols >= 0) & (cols < spec.width)
    out = np.zeros((3, depth, lateral))
    out[:, inside] = img[:, rows[inside], cols[inside]]
    return out


def _landing_cost(spec: GridSpec, landed) -> tuple:
    if landed == spec.goal:
        return 1.0 - spec.goal_reward, True
    return 1.0, False


def step(state: GridState, action: int, spec: GridSpec, rng: RngStream) -> tuple[GridState, StepResult]:
    """Advance one step; returns the new state and the step record."""
    if state.terminal:
        raise UsageError("step called on a terminal state; reset first")
    action = int(action)
    if not 0 <= action < N_ACTIONS:
        raise ParameterError(f"action {action} out of range")
    noisy = spec.noise > 0 and rng.random() < spec.noise
    applied = int(rng.integers(N_MOVES)) if noisy else action
    new = state.copy()
    new.agent = clamp_move(spec, state.agent, applied)
    if applied != 4:
        new.facing = applied
    new.steps = state.steps + 1
    if spec.dynamic and new.moving:
        new = move_obstacles(new, spec, rng)
    cost, reached = _landing_cost(spec, new.agent)
    hit = 1.0 if new.agent in new.obstacle_cells() else 0.0
    truncated = (not reached) and new.steps >= spec.episode_cap
    new.terminal = reached or truncated
    res = StepResult(
        observation=observe(new, spec),
        cost=cost,
        constraint_cost=hit,
        reward_event=reached,
        terminal=new.terminal,
        truncated=truncated,
        applied_action=applied,
        noise=bool(noisy),
    )
    return new, res


class GridWorld:
    """Stateful wrapper: fixed map per ``seed``, dynamics from a separate stream."""

    def __init__(self, spec: GridSpec, seed: int = 0, rng: RngStream | None = None):
        self.spec = spec
        self.initial = generate(spec, RngStream(seed, "gridworld/map"))
        self.rng = rng if rng is not None else RngStream(seed, "gridworld/dynamics")
        self.state = self.initial.copy()
        self.state.terminal = True

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def obs_shape(self) -> tuple:
        return self.spec.obs_shape()

    def reset(self) -> np.ndarray:
        self.state = self.initial.copy()
        return observe(self.state, self.spec)

    def step(self, action: int) -> StepResult:
        self.state, res = step(self.state, action, self.spec, self.rng)
        return res

    def observe(self) -> np.ndarray:
        return observe(self.state, self.spec)

    def render(self) -> str:
        return render(self.spec, self.state)


def render(spec: GridSpec, state: GridState) -> str:
    rows = []
    obstacles = state.obstacle_cells()
    for r in range(spec.height):
        line = []
        for c in range(spec.width):
            cell = (r, c)
            if cell == state.agent:
                line.append("A")
            elif cell == spec.goal:
                line.append("G")
            elif cell in state.moving:
                line.append("D")
            elif cell in obstacles:
                line.append("#")
            elif cell == spec.start:
                line.append("S")
            else:
                line.append(".")
        rows.append("".join(line))
    return "\n".join(rows)


# -- exact tabular model ------------------------------------------------------------------------
def transition_distribution(spec: GridSpec, cell, action: int) -> dict:
    """Exact landing distribution for ``action`` from ``cell`` including noise."""
    out: dict = {}
    intended = clamp_move(spec, cell, action)
    out[intended] = out.get(intended, 0.0) + (1.0 - spec.noise)
    for m in range(N_MOVES):
        if spec.noise == 0:
            break
        nxt = clamp_move(spec, cell, m)
        out[nxt] = out.get(nxt, 0.0) + spec.noise / N_MOVES
    return out


def to_cmdp(spec: GridSpec, d0: float, gamma: float = 1.0, seed: int = 0, max_cells: int = 100) -> CmdpModel:
    """Tabular model over agent cells for a static grid (episode cap ignored).

    ``d(x) = 1`` on obstacle cells, so with ``gamma = 1`` the accumulated
    constraint cost equals the number of obstacle landings. ``c(x, a) = 1 -
    reward * P(goal | x, a)`` and the goal is the single terminal state.
    """
    if spec.dynamic:
        raise UnsupportedError("moving obstacles have no fixed tabular model")
    if spec.n_cells > max_cells:
        raise SizeError(f"{spec.n_cells} cells exceeds the tabular limit of {max_cells}")
    state = generate(spec, seed)
    n = spec.n_cells
    P = np.zeros((n, N_ACTIONS, n))
    c = np.zeros((n, N_ACTIONS))
    d = np.zeros(n)
    goal = spec.index(spec.goal)
    for cell in state.static:
        d[spec.index(cell)] = 1.0
    for x in range(n):
        if x == goal:
            P[x, :, x] = 1.0
            continue
        for a in range(N_ACTIONS):
            for nxt, p in transition_distribution(spec, spec.cell(x), a).items():
                P[x, a, spec.index(nxt)] += p
            c[x, a] = 1.0 - spec.goal_reward * P[x, a, goal]
    return CmdpModel(P, c, d, spec.index(spec.start), d0, gamma, frozenset({goal}))


def shortest_path_length(spec: GridSpec, avoid=frozenset()) -> int | None:
    """BFS step count from start to goal on the 4-neighbour grid, skipping ``avoid`` cells."""
    from collections import deque

    seen = {spec.start: 0}
    queue = deque([spec.start])
    while queue:
        cell = queue.popleft()
        if cell == spec.goal:
            return seen[cell]
        for nxt in legal_neighbours(spec, cell):
            if nxt not in seen and nxt not in avoid:
                seen[nxt] = seen[cell] + 1
                queue.append(nxt)
    return None


# -- map files ----------------------------------------------------------------------------------
_HEADER_KEYS = ("noise", "density", "obs_mode", "window", "episode_cap", "goal_reward", "dynamic")


def save_map(spec: GridSpec, state: GridState, path) -> None:
    """One header line of ``key=value`` pairs, then one text row per grid row.

    ``.`` free, ``#`` static obstacle, ``D`` moving obstacle start,
    ``S`` start, ``G`` goal.
    """
    header = {
        "noise": repr(float(spec.noise)),
        "density": repr(float(spec.density)),
        "obs_mode": spec.obs_mode,
        "window": f"{spec.window[0]}x{spec.window[1]}",
        "episode_cap": str(spec.episode_cap),
        "goal_reward": repr(float(spec.goal_reward)),
        "dynamic": str(int(spec.dynamic)),
    }
    rows = []
    moving = set(state.moving)
    for r in range(spec.height):
        line = []
        for c in range(spec.width):
            cell = (r, c)
            if cell == spec.start:
                line.append("S")
            elif cell == spec.goal:
                line.append("G")
            elif cell in moving:
                line.append("D")
            elif cell in state.static:
                line.append("#")
            else:
                line.append(".")
        rows.append("".join(line))
    text = "# " + " ".join(f"{k}={header[k]}" for k in _HEADER_KEYS) + "\n" + "\n".join(rows) + "\n"
    Path(path).write_text(text)


def load_map(path) -> tuple[GridSpec, GridState]:
    lines = [ln.rstrip("\n") for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ParameterError("map file must start with a '#' header line")
    head = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    grid = lines[1:]
    width = len(grid[0])
    if any(len(row) != width for row in grid):
        raise ParameterError("map rows must have equal length")
    static, moving, start, goal = [], [], None, None
    for r, row in enumerate(grid):
        for c, ch in enumerate(row):
            if ch == "#":
                static.append((r, c))
            elif ch == "D":
                moving.append((r, c))
            elif ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
            elif ch != ".":
                raise ParameterError(f"unknown map character {ch!r}")
    if start is None or goal is None:
        raise ParameterError("map needs one S and one G")
    lateral, depth = (int(v) for v in head.get("window", "5x8").split("x"))
    dynamic = bool(int(head.get("dynamic", "0")))
    spec = GridSpec(
        width=width,
        height=len(grid),
        density=float(head.get("density", 0.0)),
        obstacles=tuple(static),
        start=start,
        goal=goal,
        noise=float(head.get("noise", 0.05)),
        dynamic=dynamic,
        n_dynamic=len(moving),
        dynamic_start=tuple(moving) if dynamic else None,
        obs_mode=head.get("obs_mode", "discrete"),
        window=(lateral, depth),
        episode_cap=int(head.get("episode_cap", 100)),
        goal_reward=float(head.get("goal_reward", 1000.0)),
    )
    return spec, generate(spec, 0)
