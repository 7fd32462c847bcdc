"""
Deterministic 2D pick-and-place dynamics.

A point-mass gripper moves by clipped deltas inside the unit square. Grip
transitions are resolved at the pre-move position: closing within the grasp
radius of a free block attaches the nearest one (it snaps to the gripper),
opening releases the held block where it is. A held block moves with the
gripper.
"""
from __future__ import annotations

import logging
import math
from dataclasses import replace
from typing import List, Optional, Tuple

import numpy as np

from latent_plan_vla.api.sources.sim.tasks import TASKS_BY_ID, sample_initial_state
from latent_plan_vla.schemas.episodes.episode import (
    ActionCommand, Episode, ObjectState, Observation, SimState, StepRecord, TaskSpec,
)
from latent_plan_vla.schemas.general.general import (
    COORD_BINS, GRASP_RADIUS, MAX_OBJECTS, MAX_STEP, OBJECT_COLOURS, STATE_FEATURE_DIM,
)
from latent_plan_vla.schemas.trajectories.trajectory import Point2D

logger = logging.getLogger(__name__)


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _dist(a: Point2D, b: Point2D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def step(state: SimState, action: ActionCommand, max_step: float = MAX_STEP,
         grasp_radius: float = GRASP_RADIUS) -> SimState:
    objects = list(state.objects)
    grip_closed = state.grip_closed

    if action.closed and not grip_closed:
        grip_closed = True
        best, best_d = None, math.inf
        for i, o in enumerate(objects):
            d = _dist(o.position, state.gripper)
            if not o.held and d <= grasp_radius and d < best_d:
                best, best_d = i, d
        if best is not None:
            objects[best] = replace(objects[best], position=state.gripper, held=True)
    elif not action.closed and grip_closed:
        grip_closed = False
        objects = [replace(o, held=False) if o.held else o for o in objects]

    dx = float(np.clip(action.dx, -max_step, max_step))
    dy = float(np.clip(action.dy, -max_step, max_step))
    gripper = Point2D(_clip01(state.gripper.x + dx), _clip01(state.gripper.y + dy))
    objects = [replace(o, position=gripper) if o.held else o for o in objects]

    return SimState(
        gripper=gripper,
        grip_closed=grip_closed,
        objects=tuple(objects),
        goal=state.goal,
        goal_radius=state.goal_radius,
        step=state.step + 1,
    )


def drop_held(state: SimState) -> SimState:
    """Detach the held block at its current position and open the grip."""
    objects = tuple(replace(o, held=False) if o.held else o for o in state.objects)
    return replace(state, objects=objects, grip_closed=False)


def inject_failure(state: SimState, p_drop: float, rng: np.random.Generator) -> Tuple[SimState, bool]:
    """
    One carry-step failure draw. Consumes exactly one uniform draw when a block
    is held and none otherwise.

    Returns:
        (state, dropped): the state after the draw, with the held block
        released at the gripper when dropped, and whether the drop fired.
        Callers that only need the state take element 0; ManipulationEnv
        uses the flag to stamp Episode.failure_step.
    """
    if state.held_index is None:
        return state, False
    if rng.random() < p_drop:
        return drop_held(state), True
    return state, False


def success(state: SimState, task: TaskSpec) -> bool:
    target = state.objects[task.target_index]
    return (not target.held) and (not state.grip_closed) and _dist(target.position, state.goal) <= state.goal_radius


def coord_bin(v: float, bins: int = COORD_BINS) -> int:
    """floor(v * bins) clamped to [0, bins - 1]"""
    return min(bins - 1, max(0, int(math.floor(v * bins))))


def coord_token(v: float, bins: int = COORD_BINS) -> str:
    return f"C{coord_bin(v, bins)}"


def state_features(state: SimState) -> np.ndarray:
    """
    Fixed-size state vector:
    gripper x, y, grip | per slot x, y, held, present | goal x, y, radius
    """
    f = np.zeros(STATE_FEATURE_DIM, dtype=np.float64)
    f[0], f[1], f[2] = state.gripper.x, state.gripper.y, float(state.grip_closed)
    for i, o in enumerate(state.objects[:MAX_OBJECTS]):
        base = 3 + 4 * i
        f[base:base + 4] = (o.position.x, o.position.y, float(o.held), 1.0)
    f[-3], f[-2], f[-1] = state.goal.x, state.goal.y, state.goal_radius
    return f


def state_from_features(features: np.ndarray, step_index: int = 0) -> SimState:
    """Inverse of state_features; slot order fixes the block colours."""
    f = np.asarray(features, dtype=np.float64)
    gripper = Point2D(float(f[0]), float(f[1]))
    objects = []
    for i in range(MAX_OBJECTS):
        base = 3 + 4 * i
        if f[base + 3] < 0.5:
            continue
        held = bool(f[base + 2] > 0.5)
        pos = gripper if held else Point2D(float(f[base]), float(f[base + 1]))
        objects.append(ObjectState(position=pos, held=held, colour=OBJECT_COLOURS[i]))
    return SimState(gripper=gripper, grip_closed=bool(f[2] > 0.5), objects=tuple(objects),
                    goal=Point2D(float(f[-3]), float(f[-2])), goal_radius=float(f[-1]), step=step_index)


def observe(state: SimState, task_id: int = 0, bins: int = COORD_BINS) -> Observation:
    caption: List[str] = ['GRIP', coord_token(state.gripper.x, bins), coord_token(state.gripper.y, bins),
                          'CLOSED' if state.grip_closed else 'OPEN']
    for o in state.objects:
        caption += [o.colour, coord_token(o.position.x, bins), coord_token(o.position.y, bins),
                    'HELD' if o.held else 'FREE']
    caption += ['GOAL', coord_token(state.goal.x, bins), coord_token(state.goal.y, bins)]
    return Observation(
        features=state_features(state),
        caption=tuple(caption),
        task_id=task_id,
        held=state.held_index is not None,
    )


class ManipulationEnv:
    """
    Single-threaded episode driver around `step`.

    - failure injection runs after every carry step with probability p_drop
    - forced_drop_step drops the block on the first carry step at or after it
    """

    def __init__(self, task: TaskSpec, p_drop: float = 0.0, forced_drop_step: Optional[int] = None,
                 horizon: Optional[int] = None, max_step: float = MAX_STEP, max_retries: int = 100,
                 bins: int = COORD_BINS):
        self.task = task
        self.p_drop = p_drop
        self.forced_drop_step = forced_drop_step
        self.horizon = horizon if horizon is not None else task.horizon
        self.max_step = max_step
        self.max_retries = max_retries
        self.bins = bins
        self.state: Optional[SimState] = None
        self.episode: Optional[Episode] = None
        self.history: List[Observation] = []
        self._rng: Optional[np.random.Generator] = None
        self._forced_done = False

    def reset(self, seed: int, state: Optional[SimState] = None) -> Observation:
        self._rng = np.random.default_rng(seed)
        self.state = state if state is not None else sample_initial_state(self.task, self._rng, self.max_retries)
        self.episode = Episode(task_id=self.task.task_id, seed=seed, initial_state=self.state)
        self._forced_done = False
        obs = self.observe()
        self.history = [obs]
        return obs

    def observe(self) -> Observation:
        return observe(self.state, self.task.task_id, self.bins)

    @property
    def done(self) -> bool:
        return self.episode.success or self.state.step >= self.horizon

    def step(self, action: ActionCommand) -> Observation:
        obs_before = self.history[-1]
        nxt = step(self.state, action, max_step=self.max_step)
        dropped = False
        if nxt.held_index is not None:
            if self.forced_drop_step is not None and not self._forced_done and nxt.step >= self.forced_drop_step:
                nxt, dropped = drop_held(nxt), True
                self._forced_done = True
            elif self.p_drop > 0.0:
                nxt, dropped = inject_failure(nxt, self.p_drop, self._rng)
        if dropped:
            logger.debug("block dropped at step %d", nxt.step)
            if self.episode.failure_step is None:
                self.episode.failure_step = nxt.step
        self.state = nxt
        self.episode.records.append(StepRecord(step=nxt.step - 1, observation=obs_before, action=action, state=nxt))
        self.episode.success = success(nxt, self.task)
        obs = self.observe()
        self.history.append(obs)
        return obs

    def window(self, length: int) -> Tuple[Observation, Observation, Observation]:
        """(oldest, mid, current) observations of the last `length` steps."""
        recent = self.history[-(length + 1):]
        return recent[0], recent[len(recent) // 2], recent[-1]


def make_env(task_id: int, **kwargs) -> ManipulationEnv:
    return ManipulationEnv(TASKS_BY_ID[task_id], **kwargs)
