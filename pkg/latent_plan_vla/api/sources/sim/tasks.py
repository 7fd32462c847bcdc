from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from latent_plan_vla.schemas.episodes.episode import ObjectState, SimState, TaskSpec
from latent_plan_vla.schemas.general.errors import DomainError, TaskSamplingError
from latent_plan_vla.schemas.general.general import (
    GOAL_RADIUS, GRASP_RADIUS, MIN_OBJECT_GOAL_SEPARATION, OBJECT_COLOURS, TaskKind,
)
from latent_plan_vla.schemas.trajectories.trajectory import Point2D

# objects never start closer than this to one another, so a grasp at one block's
# centre cannot pick up the other
MIN_OBJECT_SEPARATION = 2 * GRASP_RADIUS

TASK_LIBRARY: Dict[str, TaskSpec] = {
    'red-to-tray': TaskSpec(
        task_id=0,
        name='red-to-tray',
        instruction='move the red block to the tray',
        num_objects=1,
        object_region=(0.1, 0.9, 0.1, 0.45),
        goal_region=(0.15, 0.85, 0.55, 0.85),
    ),
    'blue-to-tray': TaskSpec(
        task_id=1,
        name='blue-to-tray',
        instruction='move the blue block to the tray',
        num_objects=2,
        target_index=1,
        object_region=(0.1, 0.9, 0.1, 0.45),
        goal_region=(0.15, 0.85, 0.55, 0.85),
    ),
    # goal band never used by the training tasks
    'red-to-bin': TaskSpec(
        task_id=2,
        name='red-to-bin',
        instruction='move the red block to the bin',
        num_objects=1,
        object_region=(0.1, 0.9, 0.5, 0.9),
        goal_region=(0.15, 0.85, 0.1, 0.3),
    ),
    'grasp-check': TaskSpec(
        task_id=3,
        name='grasp-check',
        instruction='is the red block in the gripper',
        kind=TaskKind.CHOICE,
        num_objects=1,
        object_region=(0.1, 0.9, 0.1, 0.45),
        goal_region=(0.15, 0.85, 0.55, 0.85),
        options=('yes', 'no'),
    ),
    'block-side': TaskSpec(
        task_id=4,
        name='block-side',
        instruction='where is the red block relative to the gripper',
        kind=TaskKind.CHOICE,
        num_objects=1,
        object_region=(0.1, 0.9, 0.1, 0.45),
        goal_region=(0.15, 0.85, 0.55, 0.85),
        options=('left', 'right', 'above', 'below'),
    ),
}

TASKS_BY_ID: Dict[int, TaskSpec] = {t.task_id: t for t in TASK_LIBRARY.values()}
TASKS_BY_INSTRUCTION: Dict[str, TaskSpec] = {t.instruction: t for t in TASK_LIBRARY.values()}


def get_task(name: str) -> TaskSpec:
    try:
        return TASK_LIBRARY[name]
    except KeyError:
        raise DomainError(f"unknown task {name!r}; expected one of {sorted(TASK_LIBRARY)}") from None


def task_for_instruction(instruction: str) -> TaskSpec:
    task = TASKS_BY_INSTRUCTION.get(instruction.strip().lower())
    if task is None:
        raise DomainError(f"unknown instruction {instruction!r}")
    return task


def _draw(rng: np.random.Generator, region) -> Point2D:
    x_lo, x_hi, y_lo, y_hi = region
    return Point2D(float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))


def _dist(a: Point2D, b: Point2D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _valid_layout(objects, goal: Point2D) -> bool:
    for i, o in enumerate(objects):
        if _dist(o, goal) < MIN_OBJECT_GOAL_SEPARATION:
            return False
        for other in objects[i + 1:]:
            if _dist(o, other) < MIN_OBJECT_SEPARATION:
                return False
    return True


def sample_initial_state(task: TaskSpec, rng: np.random.Generator, max_retries: int = 100,
                         start_held: Optional[bool] = None) -> SimState:
    """
    Draw an initial state for `task` from its regions.

    Choice tasks start with the target held half of the time (or as `start_held`
    says) so that questions about the gripper have both answers.
    """
    for _ in range(max_retries):
        gripper = _draw(rng, task.gripper_region)
        goal = _draw(rng, task.goal_region)
        positions = [_draw(rng, task.object_region) for _ in range(task.num_objects)]
        if not _valid_layout(positions, goal):
            continue
        held = start_held
        if held is None:
            held = task.kind is TaskKind.CHOICE and bool(rng.random() < 0.5)
        objects = []
        for i, p in enumerate(positions):
            is_held = held and i == task.target_index
            objects.append(ObjectState(position=gripper if is_held else p, held=is_held, colour=OBJECT_COLOURS[i]))
        return SimState(gripper=gripper, grip_closed=bool(held), objects=tuple(objects), goal=goal,
                        goal_radius=GOAL_RADIUS)
    raise TaskSamplingError(f"no valid layout for {task.name} after {max_retries} draws")
