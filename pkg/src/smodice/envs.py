"""Gridworlds for the mismatched-expert and learn-from-success-examples tasks.

Cells are ``(row, col)`` with row 0 at the top. States enumerate the
non-wall cells in row-major order.
"""

from __future__ import annotations

import enum
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from smodice.mdp import OccupancyMeasure, TabularMdp, TabularPolicy, compute_occupancy

Cell = tuple[int, int]


class MoveSet(enum.Enum):
    CARDINAL4 = "cardinal4"
    DIAGONAL8 = "diagonal8"


# Diagonal8 extends Cardinal4, so action indices 0-3 mean the same thing in both.
_MOVES = {
    MoveSet.CARDINAL4: ((-1, 0), (0, 1), (1, 0), (0, -1)),
    MoveSet.DIAGONAL8: ((-1, 0), (0, 1), (1, 0), (0, -1), (-1, 1), (1, 1), (1, -1), (-1, -1)),
}
ACTION_NAMES = ("up", "right", "down", "left", "up-right", "down-right", "down-left", "up-left")


class GridSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    start_cells: dict = field(default_factory=lambda: {(0, 0): 1.0})
    walls: frozenset = frozenset()
    move_set: MoveSet = MoveSet.CARDINAL4
    slip_prob: float = 0.0
    goal: Cell | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GridSpecError("grid dimensions must be positive")
        walls = frozenset(tuple(c) for c in self.walls)
        starts = {tuple(c): float(w) for c, w in dict(self.start_cells).items()}
        goal = None if self.goal is None else tuple(self.goal)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "start_cells", starts)
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "move_set", MoveSet(self.move_set))
        for c in [*walls, *starts, *([goal] if goal else [])]:
            if not self.in_bounds(c):
                raise GridSpecError(f"cell {c} outside {self.height}x{self.width} grid")
        if not starts:
            raise GridSpecError("at least one start cell is required")
        if walls & set(starts):
            raise GridSpecError(f"start cells on walls: {sorted(walls & set(starts))}")
        if goal is not None and goal in walls:
            raise GridSpecError(f"goal {goal} is a wall")
        if min(starts.values()) < 0 or abs(sum(starts.values()) - 1.0) > 1e-12:
            raise GridSpecError("start weights must be nonnegative and sum to 1")
        if not 0.0 <= self.slip_prob < 1.0:
            raise GridSpecError(f"slip_prob must lie in [0, 1), got {self.slip_prob}")

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    @property
    def moves(self) -> tuple:
        return _MOVES[self.move_set]

    @property
    def num_actions(self) -> int:
        return len(self.moves)

    def cells(self) -> list:
        return [
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if (r, c) not in self.walls
        ]

    def state_index(self) -> dict:
        return {cell: i for i, cell in enumerate(self.cells())}

    def step(self, cell: Cell, action: int) -> Cell | None:
        """Target of a move, or None when it leaves the grid or hits a wall."""
        dr, dc = self.moves[action]
        target = (cell[0] + dr, cell[1] + dc)
        if not self.in_bounds(target) or target in self.walls:
            return None
        return target

    def with_move_set(self, move_set: MoveSet) -> "GridSpec":
        return GridSpec(
            self.width, self.height, dict(self.start_cells), self.walls,
            MoveSet(move_set), self.slip_prob, self.goal,
        )

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "walls": sorted(list(c) for c in self.walls),
            "start_cells": [[r, c, w] for (r, c), w in sorted(self.start_cells.items())],
            "move_set": self.move_set.value,
            "slip_prob": self.slip_prob,
            "goal": None if self.goal is None else list(self.goal),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GridSpec":
        try:
            return cls(
                width=int(doc["width"]),
                height=int(doc["height"]),
                walls=frozenset(tuple(c) for c in doc.get("walls", [])),
                start_cells={(int(r), int(c)): float(w) for r, c, w in doc.get("start_cells", [[0, 0, 1.0]])},
                move_set=MoveSet(doc.get("move_set", "cardinal4")),
                slip_prob=float(doc.get("slip_prob", 0.0)),
                goal=None if doc.get("goal") is None else tuple(doc["goal"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GridSpecError):
                raise
            raise GridSpecError(f"invalid grid document: {exc}") from None


def reachable_cells(spec: GridSpec) -> set:
    """BFS over legal moves from every start cell with positive weight."""
    seen = {c for c, w in spec.start_cells.items() if w > 0}
    queue = deque(seen)
    while queue:
        cell = queue.popleft()
        if cell == spec.goal:
            continue
        for a in range(spec.num_actions):
            nxt = spec.step(cell, a)
            if nxt is not None and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def build_mdp(spec: GridSpec, gamma: float) -> TabularMdp:
    """Materialize the grid as a TabularMdp.

    Blocked moves self-loop. The goal, if any, is absorbing. With
    ``slip_prob > 0`` that mass is shared uniformly by the other legal moves.
    """
    index = spec.state_index()
    S, A = len(index), spec.num_actions
    transition = np.zeros((S, A, S))
    for cell, s in index.items():
        if cell == spec.goal:
            transition[s, :, s] = 1.0
            continue
        legal = [a for a in range(A) if spec.step(cell, a) is not None]
        for a in range(A):
            target = spec.step(cell, a)
            intended = s if target is None else index[target]
            others = [b for b in legal if b != a]
            if spec.slip_prob == 0.0 or not others:
                transition[s, a, intended] = 1.0
                continue
            transition[s, a, intended] += 1.0 - spec.slip_prob
            for b in others:
                transition[s, a, index[spec.step(cell, b)]] += spec.slip_prob / len(others)
    initial = np.zeros(S)
    for cell, w in spec.start_cells.items():
        initial[index[cell]] = w
    if spec.goal is not None and spec.goal not in reachable_cells(spec):
        warnings.warn(f"goal {spec.goal} is unreachable from the start cells", stacklevel=2)
    return TabularMdp(transition, initial, gamma)


def _distance_to_goal(spec: GridSpec) -> dict:
    """Shortest move count to the goal (BFS on reversed legal moves)."""
    cells = spec.cells()
    preds = {c: [] for c in cells}
    for cell in cells:
        for a in range(spec.num_actions):
            nxt = spec.step(cell, a)
            if nxt is not None:
                preds[nxt].append(cell)
    dist = {spec.goal: 0}
    queue = deque([spec.goal])
    while queue:
        cell = queue.popleft()
        for p in preds[cell]:
            if p not in dist:
                dist[p] = dist[cell] + 1
                queue.append(p)
    return dist


def diagonal_expert_policy(spec: GridSpec) -> TabularPolicy:
    """Deterministic shortest-path policy toward the goal on the Diagonal8 grid.

    Ties go to the lowest action index; the goal and cells that cannot
    reach it take action 0.
    """
    if spec.move_set is not MoveSet.DIAGONAL8:
        raise GridSpecError("the diagonal expert needs the diagonal8 move set")
    if spec.goal is None:
        raise GridSpecError("the diagonal expert needs a goal cell")
    dist = _distance_to_goal(spec)
    actions = []
    for cell in spec.cells():
        best, best_d = 0, dist.get(cell, np.inf)
        if cell != spec.goal:
            for a in range(spec.num_actions):
                nxt = spec.step(cell, a)
                d = dist.get(nxt, np.inf) if nxt is not None else np.inf
                if d < best_d:
                    best, best_d = a, d
        actions.append(best)
    return TabularPolicy.deterministic(actions, spec.num_actions)


def random_behavior_policy(spec: GridSpec) -> TabularPolicy:
    return TabularPolicy.uniform(len(spec.cells()), spec.num_actions)


@dataclass(frozen=True)
class GridExperiment:
    """A named imitation task on a gridworld.

    ``grid`` is the imitator's environment. A mismatched-expert task sets
    ``expert_move_set``; the expert then acts on the same cells with its own
    moves. A success-example task lists ``success_cells`` instead.
    """

    name: str
    grid: GridSpec
    gamma: float = 0.99
    expert_move_set: MoveSet | None = None
    success_cells: tuple = ()

    @property
    def kind(self) -> str:
        return "mismatched" if self.expert_move_set is not None else "examples"

    def imitator_mdp(self) -> TabularMdp:
        return build_mdp(self.grid, self.gamma)

    def expert_grid(self) -> GridSpec:
        if self.expert_move_set is None:
            raise GridSpecError(f"experiment {self.name!r} has no expert move set")
        return self.grid.with_move_set(self.expert_move_set)

    def expert_mdp(self) -> TabularMdp:
        return build_mdp(self.expert_grid(), self.gamma)

    def expert_policy(self) -> TabularPolicy:
        return diagonal_expert_policy(self.expert_grid())

    def expert_occupancy(self) -> OccupancyMeasure:
        return compute_occupancy(self.expert_mdp(), self.expert_policy())

    def success_states(self) -> list:
        index = self.grid.state_index()
        return [index[tuple(c)] for c in self.success_cells]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gamma": self.gamma,
            "grid": self.grid.to_dict(),
            "expert_move_set": None if self.expert_move_set is None else self.expert_move_set.value,
            "success_cells": [list(c) for c in self.success_cells],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GridExperiment":
        if "grid" not in doc:
            # bare GridSpec document: an example task at its goal, if any
            grid = GridSpec.from_dict(doc)
            return cls("custom", grid, success_cells=(grid.goal,) if grid.goal else ())
        ems = doc.get("expert_move_set")
        return cls(
            name=str(doc.get("name", "custom")),
            grid=GridSpec.from_dict(doc["grid"]),
            gamma=float(doc.get("gamma", 0.99)),
            expert_move_set=None if ems is None else MoveSet(ems),
            success_cells=tuple(tuple(c) for c in doc.get("success_cells", [])),
        )


def default_grid(move_set: MoveSet = MoveSet.CARDINAL4) -> GridSpec:
    """7x7 open grid, start in the top-left corner, goal in the opposite corner."""
    return GridSpec(7, 7, {(0, 0): 1.0}, frozenset(), move_set, 0.0, (6, 6))


def figure2a(gamma: float = 0.99) -> GridExperiment:
    """3x3 grid: cardinal imitator, diagonal expert, corner to corner.

    Small enough (4^9 deterministic policies) for exhaustive search.
    """
    grid = GridSpec(3, 3, {(0, 0): 1.0}, frozenset(), MoveSet.CARDINAL4, 0.0, (2, 2))
    return GridExperiment("figure2a", grid, gamma, expert_move_set=MoveSet.DIAGONAL8)


def figure2b(gamma: float = 0.99) -> GridExperiment:
    """6-wide, 5-tall grid with one absorbing success cell nine moves from the start."""
    grid = GridSpec(6, 5, {(0, 0): 1.0}, frozenset(), MoveSet.CARDINAL4, 0.0, (4, 5))
    return GridExperiment("figure2b", grid, gamma, success_cells=((4, 5),))


PRESETS = {"figure2a": figure2a, "figure2b": figure2b}


def load_experiment(name_or_path: str, gamma: float | None = None) -> GridExperiment:
    """Resolve a preset name or a JSON file (experiment or bare grid document)."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]() if gamma is None else PRESETS[name_or_path](gamma)
    try:
        doc = json.loads(Path(name_or_path).read_text())
    except FileNotFoundError:
        raise GridSpecError(
            f"{name_or_path!r} is neither a preset ({', '.join(PRESETS)}) nor a file"
        ) from None
    except json.JSONDecodeError as exc:
        raise GridSpecError(f"{name_or_path}: invalid JSON ({exc})") from None
    exp = GridExperiment.from_dict(doc)
    if gamma is not None:
        exp = GridExperiment(exp.name, exp.grid, gamma, exp.expert_move_set, exp.success_cells)
    return exp
