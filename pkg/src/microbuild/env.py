"""MicroBuild: a deterministic, seedable build-order mini-game.

One base and five workers mine a steady mineral income. Supply depots
raise the supply cap, one barracks trains marines, and the episode score
is the number of marines completed. Reward is sparse: +1 exactly when a
marine finishes. Rule-based detectors report goal transitions (used both
for subtask shaping and for labeling embedding-training data).

States are immutable-by-convention: ``step`` clones, mutates the clone and
returns it, so callers can hold (prev, next) pairs for transition checks.
Workers never move; a worker building something is busy until the site
completes. Construction sites are tracked off-grid and drawn only once
finished, so a completion is visible as a new unit in the frame stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

GRID = 16
HORIZON = 720

CELL_EMPTY, CELL_BASE, CELL_MINERAL, CELL_WORKER, CELL_DEPOT, CELL_BARRACKS, CELL_MARINE = range(7)

A_NOOP, A_SELECT_WORKER, A_BUILD_DEPOT, A_BUILD_BARRACKS, A_SELECT_BARRACKS, A_TRAIN_MARINE = range(6)
N_ACTIONS = 6
ACTION_NAMES = ("noop", "select-worker", "build-depot", "build-barracks", "select-barracks", "train-marine")

DEPOT_COST, BARRACKS_COST, MARINE_COST = 100, 150, 50
DEPOT_TIME, BARRACKS_TIME, MARINE_TIME = 20, 30, 15
SUPPLY_PER_DEPOT = 8
N_STARTING_WORKERS = 5
STARTING_MINERALS = 50

SEL_NONE, SEL_WORKER, SEL_BARRACKS = 0, 1, 2

# detector / command ids (shared with the command set files)
EV_SELECT_WORKER, EV_BUILD_DEPOT, EV_BUILD_BARRACKS, EV_SELECT_BARRACKS, EV_TRAIN_MARINE = range(5)
N_COMMANDS = 5
EVENT_NAMES = ("select-worker", "build-depot", "build-barracks", "select-barracks", "train-marine")

OBS_CHANNELS = 14  # 2 frames x (6 unit-type layers + 1 selection layer)
OBS_NONSPATIAL = 10


class ContractViolation(RuntimeError):
    """An operation was called outside its stated preconditions."""


class Action(NamedTuple):
    kind: int
    x: int = 0  # column, build actions only
    y: int = 0  # row, build actions only


NOOP = Action(A_NOOP)


class BuildSite(NamedTuple):
    kind: int  # CELL_DEPOT or CELL_BARRACKS
    timer: int
    worker: tuple[int, int]


@dataclass
class GameState:
    grid: np.ndarray  # (GRID, GRID) uint8 cell types; sites not drawn
    minerals: int
    supply_used: int
    supply_cap: int
    sel_kind: int
    sel_pos: tuple[int, int]
    workers: tuple[tuple[int, int], ...]  # fixed positions
    build_sites: dict[tuple[int, int], BuildSite]
    train_jobs: dict[tuple[int, int], int]  # barracks pos -> countdown
    n_workers: int
    n_depots: int
    n_barracks: int
    n_marines: int
    step: int
    horizon: int = HORIZON
    barracks_list: list[tuple[int, int]] = field(default_factory=list)

    def clone(self) -> "GameState":
        return GameState(
            grid=self.grid.copy(),
            minerals=self.minerals,
            supply_used=self.supply_used,
            supply_cap=self.supply_cap,
            sel_kind=self.sel_kind,
            sel_pos=self.sel_pos,
            workers=self.workers,
            build_sites=dict(self.build_sites),
            train_jobs=dict(self.train_jobs),
            n_workers=self.n_workers,
            n_depots=self.n_depots,
            n_barracks=self.n_barracks,
            n_marines=self.n_marines,
            step=self.step,
            horizon=self.horizon,
            barracks_list=list(self.barracks_list),
        )

    def busy_workers(self) -> set[tuple[int, int]]:
        return {site.worker for site in self.build_sites.values()}

    def first_idle_worker(self) -> tuple[int, int] | None:
        busy = self.busy_workers()
        for pos in self.workers:
            if pos not in busy:
                return pos
        return None

    def is_free(self, pos: tuple[int, int]) -> bool:
        return self.grid[pos] == CELL_EMPTY and pos not in self.build_sites

    def fingerprint(self) -> bytes:
        """Canonical byte encoding; equal iff the states are identical."""
        parts = [
            self.grid.tobytes(),
            np.int64(
                [
                    self.minerals,
                    self.supply_used,
                    self.supply_cap,
                    self.sel_kind,
                    self.sel_pos[0],
                    self.sel_pos[1],
                    self.n_workers,
                    self.n_depots,
                    self.n_barracks,
                    self.n_marines,
                    self.step,
                    self.horizon,
                ]
            ).tobytes(),
            repr(sorted(self.build_sites.items())).encode(),
            repr(sorted(self.train_jobs.items())).encode(),
            repr(self.workers).encode(),
            repr(self.barracks_list).encode(),
        ]
        return b"|".join(parts)


@dataclass
class Observation:
    spatial: np.ndarray  # (14, 16, 16) float32 in {0, 1}
    nonspatial: np.ndarray  # (10,) float32 in [0, 1]


def reset(seed: int, horizon: int = HORIZON) -> GameState:
    """Initial state: 1 base, 5 workers, 50 minerals. Layout varies by seed."""
    rng = np.random.default_rng(seed)
    grid = np.zeros((GRID, GRID), dtype=np.uint8)
    base = (int(rng.integers(5, 11)), int(rng.integers(5, 11)))
    grid[base] = CELL_BASE

    def ring(center, lo, hi):
        out = []
        for r in range(GRID):
            for c in range(GRID):
                d = max(abs(r - center[0]), abs(c - center[1]))
                if lo <= d <= hi and grid[r, c] == CELL_EMPTY:
                    out.append((r, c))
        return out

    patch_cells = ring(base, 2, 3)
    idx = rng.choice(len(patch_cells), size=6, replace=False)
    for i in idx:
        grid[patch_cells[i]] = CELL_MINERAL

    worker_cells = ring(base, 1, 2)
    idx = rng.choice(len(worker_cells), size=N_STARTING_WORKERS, replace=False)
    workers = tuple(sorted(worker_cells[i] for i in idx))
    for pos in workers:
        grid[pos] = CELL_WORKER

    return GameState(
        grid=grid,
        minerals=STARTING_MINERALS,
        supply_used=0,
        supply_cap=0,
        sel_kind=SEL_NONE,
        sel_pos=(-1, -1),
        workers=workers,
        build_sites={},
        train_jobs={},
        n_workers=N_STARTING_WORKERS,
        n_depots=0,
        n_barracks=0,
        n_marines=0,
        step=0,
        horizon=horizon,
    )


def _nearest_free_cell(state: GameState, center: tuple[int, int]) -> tuple[int, int] | None:
    for radius in range(1, GRID):
        best = None
        for r in range(max(0, center[0] - radius), min(GRID, center[0] + radius + 1)):
            for c in range(max(0, center[1] - radius), min(GRID, center[1] + radius + 1)):
                if max(abs(r - center[0]), abs(c - center[1])) != radius:
                    continue
                if state.is_free((r, c)) and (best is None or (r, c) < best):
                    best = (r, c)
        if best is not None:
            return best
    return None


def _tick(state: GameState) -> None:
    for pos in sorted(state.build_sites):
        site = state.build_sites[pos]
        timer = site.timer - 1
        if timer > 0:
            state.build_sites[pos] = site._replace(timer=timer)
            continue
        del state.build_sites[pos]
        state.grid[pos] = site.kind
        if site.kind == CELL_DEPOT:
            state.n_depots += 1
            state.supply_cap = SUPPLY_PER_DEPOT * state.n_depots
        else:
            state.n_barracks += 1
            state.barracks_list.append(pos)
    for pos in sorted(state.train_jobs):
        timer = state.train_jobs[pos] - 1
        if timer > 0:
            state.train_jobs[pos] = timer
            continue
        spawn = _nearest_free_cell(state, pos)
        if spawn is None:
            state.train_jobs[pos] = 1  # grid full: retry next step
            continue
        del state.train_jobs[pos]
        state.grid[spawn] = CELL_MARINE
        state.n_marines += 1


def _action_is_legal(state: GameState, action: Action) -> bool:
    kind = action.kind
    if kind == A_NOOP:
        return True
    if kind == A_SELECT_WORKER:
        return state.first_idle_worker() is not None
    if kind == A_SELECT_BARRACKS:
        return state.n_barracks > 0
    if kind == A_TRAIN_MARINE:
        return (
            state.sel_kind == SEL_BARRACKS
            and state.minerals >= MARINE_COST
            and state.supply_used < state.supply_cap
            and state.sel_pos not in state.train_jobs
        )
    if kind in (A_BUILD_DEPOT, A_BUILD_BARRACKS):
        if state.sel_kind != SEL_WORKER or state.sel_pos in state.busy_workers():
            return False
        cost = DEPOT_COST if kind == A_BUILD_DEPOT else BARRACKS_COST
        if state.minerals < cost:
            return False
        if kind == A_BUILD_BARRACKS and state.n_depots < 1:
            return False
        target = (action.y, action.x)
        if not (0 <= action.x < GRID and 0 <= action.y < GRID):
            return False
        return state.is_free(target)
    return False


def legal_actions(state: GameState) -> np.ndarray:
    """Mask over the 6 action ids: bit set iff some instantiation is legal."""
    mask = np.zeros(N_ACTIONS, dtype=bool)
    mask[A_NOOP] = True
    mask[A_SELECT_WORKER] = state.first_idle_worker() is not None
    mask[A_SELECT_BARRACKS] = state.n_barracks > 0
    mask[A_TRAIN_MARINE] = (
        state.sel_kind == SEL_BARRACKS
        and state.minerals >= MARINE_COST
        and state.supply_used < state.supply_cap
        and state.sel_pos not in state.train_jobs
    )
    worker_ready = state.sel_kind == SEL_WORKER and state.sel_pos not in state.busy_workers()
    if worker_ready:
        free_exists = int((state.grid == CELL_EMPTY).sum()) > len(state.build_sites)
        mask[A_BUILD_DEPOT] = state.minerals >= DEPOT_COST and free_exists
        mask[A_BUILD_BARRACKS] = (
            state.minerals >= BARRACKS_COST and state.n_depots >= 1 and free_exists
        )
    return mask


def step(state: GameState, action: Action) -> tuple[GameState, float, bool]:
    """Advance one tick. Illegal or unaffordable actions degrade to NoOp.

    Reward equals the number of marines completed during the tick. Order:
    running timers resolve first, then the action applies, then income.
    """
    if state.step >= state.horizon:
        raise ContractViolation(f"step called on a finished episode (step={state.step})")
    marines_before = state.n_marines
    nxt = state.clone()
    _tick(nxt)
    if _action_is_legal(nxt, action):
        kind = action.kind
        if kind == A_SELECT_WORKER:
            pos = nxt.first_idle_worker()
            nxt.sel_kind, nxt.sel_pos = SEL_WORKER, pos
        elif kind == A_SELECT_BARRACKS:
            nxt.sel_kind, nxt.sel_pos = SEL_BARRACKS, nxt.barracks_list[0]
        elif kind == A_TRAIN_MARINE:
            nxt.minerals -= MARINE_COST
            nxt.supply_used += 1
            nxt.train_jobs[nxt.sel_pos] = MARINE_TIME
        elif kind == A_BUILD_DEPOT:
            nxt.minerals -= DEPOT_COST
            nxt.build_sites[(action.y, action.x)] = BuildSite(CELL_DEPOT, DEPOT_TIME, nxt.sel_pos)
        elif kind == A_BUILD_BARRACKS:
            nxt.minerals -= BARRACKS_COST
            nxt.build_sites[(action.y, action.x)] = BuildSite(CELL_BARRACKS, BARRACKS_TIME, nxt.sel_pos)
    nxt.minerals += nxt.n_workers
    nxt.step += 1
    reward = float(nxt.n_marines - marines_before)
    return nxt, reward, nxt.step >= nxt.horizon


def detect(prev: GameState, nxt: GameState) -> frozenset[int]:
    """Goal-transition detectors; fire only on actual change."""
    events = set()
    if nxt.n_depots > prev.n_depots:
        events.add(EV_BUILD_DEPOT)
    if nxt.n_barracks > prev.n_barracks:
        events.add(EV_BUILD_BARRACKS)
    if nxt.n_marines > prev.n_marines:
        events.add(EV_TRAIN_MARINE)
    if nxt.sel_kind == SEL_WORKER and (prev.sel_kind != SEL_WORKER or prev.sel_pos != nxt.sel_pos):
        events.add(EV_SELECT_WORKER)
    if nxt.sel_kind == SEL_BARRACKS and (prev.sel_kind != SEL_BARRACKS or prev.sel_pos != nxt.sel_pos):
        events.add(EV_SELECT_BARRACKS)
    return frozenset(events)


_UNIT_TYPES = np.arange(CELL_BASE, CELL_MARINE + 1, dtype=np.uint8).reshape(6, 1, 1)


def _frame_layers(state: GameState, out: np.ndarray) -> None:
    out[:6] = state.grid[None, :, :] == _UNIT_TYPES
    out[6] = 0.0
    if state.sel_kind != SEL_NONE:
        out[6][state.sel_pos] = 1.0


def encode_observation(prev_state: GameState | None, state: GameState) -> Observation:
    """Two stacked frames of unit-type + selection layers, plus scalars.

    ``prev_state=None`` duplicates the current frame (episode start).
    """
    if prev_state is None:
        prev_state = state
    spatial = np.zeros((OBS_CHANNELS, GRID, GRID), dtype=np.float32)
    _frame_layers(prev_state, spatial[:7])
    _frame_layers(state, spatial[7:])
    nonspatial = np.array(
        [
            state.minerals / 1000.0,
            state.supply_used / 64.0,
            state.supply_cap / 64.0,
            state.n_workers / 32.0,
            state.n_depots / 32.0,
            state.n_barracks / 32.0,
            state.n_marines / 32.0,
            1.0 if state.sel_kind == SEL_NONE else 0.0,
            1.0 if state.sel_kind == SEL_WORKER else 0.0,
            1.0 if state.sel_kind == SEL_BARRACKS else 0.0,
        ],
        dtype=np.float32,
    )
    np.clip(nonspatial, 0.0, 1.0, out=nonspatial)
    return Observation(spatial=spatial, nonspatial=nonspatial)


def _first_free_cell(state: GameState) -> tuple[int, int] | None:
    flat = np.flatnonzero(state.grid.reshape(-1) == CELL_EMPTY)
    for i in flat:
        pos = (int(i) // GRID, int(i) % GRID)
        if pos not in state.build_sites:
            return pos
    return None


def scripted_expert(state: GameState) -> Action:
    """Deterministic build order: keep supply ahead, one barracks, train.

    Builds a depot whenever headroom drops below 2, builds exactly one
    barracks, then loops TrainMarine, pre-selecting units as needed.
    """
    pending = {site.kind for site in state.build_sites.values()}
    depot_wanted = (
        state.supply_cap - state.supply_used < 2 and CELL_DEPOT not in pending
    )
    barracks_wanted = (
        state.n_barracks == 0 and CELL_BARRACKS not in pending and state.n_depots >= 1
    )
    if depot_wanted or barracks_wanted:
        cost = DEPOT_COST if depot_wanted else BARRACKS_COST
        sel_is_idle_worker = (
            state.sel_kind == SEL_WORKER and state.sel_pos not in state.busy_workers()
        )
        if not sel_is_idle_worker:
            return Action(A_SELECT_WORKER) if state.first_idle_worker() else NOOP
        if state.minerals < cost:
            return NOOP
        target = _first_free_cell(state)
        if target is None:
            return NOOP
        kind = A_BUILD_DEPOT if depot_wanted else A_BUILD_BARRACKS
        return Action(kind, x=target[1], y=target[0])
    if state.n_barracks >= 1:
        rax = state.barracks_list[0]
        can_train = (
            state.minerals >= MARINE_COST
            and state.supply_used < state.supply_cap
            and rax not in state.train_jobs
        )
        if can_train:
            if state.sel_kind == SEL_BARRACKS and state.sel_pos == rax:
                return Action(A_TRAIN_MARINE)
            return Action(A_SELECT_BARRACKS)
    return NOOP


def random_legal_action(state: GameState, rng: np.random.Generator) -> Action:
    """Uniform over legal action ids; build targets uniform over free cells."""
    mask = legal_actions(state)
    ids = np.flatnonzero(mask)
    kind = int(ids[rng.integers(len(ids))])
    if kind in (A_BUILD_DEPOT, A_BUILD_BARRACKS):
        free = np.flatnonzero(state.grid.reshape(-1) == CELL_EMPTY)
        free = [i for i in free if (int(i) // GRID, int(i) % GRID) not in state.build_sites]
        cell = int(free[rng.integers(len(free))])
        return Action(kind, x=cell % GRID, y=cell // GRID)
    return Action(kind)


def counts_dict(state: GameState) -> dict:
    return {
        "minerals": state.minerals,
        "supply_used": state.supply_used,
        "supply_cap": state.supply_cap,
        "workers": state.n_workers,
        "depots": state.n_depots,
        "barracks": state.n_barracks,
        "marines": state.n_marines,
    }


def trajectory_records(seed: int, actions: Iterable[Action], horizon: int = HORIZON) -> list[dict]:
    """Replay actions from ``reset(seed)`` into one JSON-able record per step."""
    state = reset(seed, horizon)
    records = []
    for action in actions:
        prev = state
        state, reward, done = step(state, action)
        records.append(
            {
                "step": state.step,
                "action": {
                    "id": action.kind,
                    "name": ACTION_NAMES[action.kind],
                    "x": action.x if action.kind in (A_BUILD_DEPOT, A_BUILD_BARRACKS) else None,
                    "y": action.y if action.kind in (A_BUILD_DEPOT, A_BUILD_BARRACKS) else None,
                },
                "reward": reward,
                "counts": counts_dict(state),
                "events": sorted(EVENT_NAMES[e] for e in detect(prev, state)),
            }
        )
        if done:
            break
    return records


def dump_trajectory(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class Episode:
    """Stateful convenience wrapper holding the (prev, current) frame pair."""

    def __init__(self, seed: int, horizon: int = HORIZON):
        self.state = reset(seed, horizon)
        self.prev = self.state
        self.score = 0.0

    def observe(self) -> Observation:
        return encode_observation(self.prev, self.state)

    def legal_mask(self) -> np.ndarray:
        return legal_actions(self.state)

    def step(self, action: Action) -> tuple[Observation, float, bool, frozenset[int]]:
        self.prev = self.state
        self.state, reward, done = step(self.state, action)
        self.score += reward
        events = detect(self.prev, self.state)
        return encode_observation(self.prev, self.state), reward, done, events
