from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import (
    DEFAULT_HORIZON, GOAL_RADIUS, MAX_STEP, TaskKind,
)
from latent_plan_vla.schemas.trajectories.trajectory import Point2D, Trajectory


@dataclass(frozen=True)
class ActionCommand:
    """
    Planar gripper command.
    - dx, dy: gripper deltas, |.| <= max_step
    - grip: in [-1, 1], >= 0 means closed
    """
    dx: float
    dy: float
    grip: float

    @property
    def closed(self) -> bool:
        return self.grip >= 0.0

    @classmethod
    def from_array(cls, a, max_step: float = MAX_STEP) -> 'ActionCommand':
        dx, dy, grip = (float(v) for v in a)
        return cls(
            dx=float(np.clip(dx, -max_step, max_step)),
            dy=float(np.clip(dy, -max_step, max_step)),
            grip=float(np.clip(grip, -1.0, 1.0)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.grip], dtype=np.float64)


@dataclass(frozen=True)
class ObjectState:
    position: Point2D
    held: bool = False
    colour: str = 'red'


@dataclass(frozen=True)
class SimState:
    gripper: Point2D
    grip_closed: bool
    objects: Tuple[ObjectState, ...]
    goal: Point2D
    goal_radius: float = GOAL_RADIUS
    step: int = 0

    def __post_init__(self):
        held = [o for o in self.objects if o.held]
        if len(held) > 1:
            raise DomainError("at most one object may be held")
        if held and held[0].position != self.gripper:
            raise DomainError("held object must sit at the gripper position")

    @property
    def held_index(self) -> Optional[int]:
        for i, o in enumerate(self.objects):
            if o.held:
                return i
        return None

    def with_step(self, step: int) -> 'SimState':
        return replace(self, step=step)


@dataclass(frozen=True)
class TaskSpec:
    """
    One entry of the task library.
    - regions are (x_lo, x_hi, y_lo, y_hi) boxes the initial-state sampler draws from
    - target_index names which object the instruction refers to
    """
    task_id: int
    name: str
    instruction: str
    kind: TaskKind = TaskKind.PICK_PLACE
    num_objects: int = 1
    target_index: int = 0
    gripper_region: Tuple[float, float, float, float] = (0.1, 0.9, 0.1, 0.9)
    object_region: Tuple[float, float, float, float] = (0.1, 0.9, 0.1, 0.9)
    goal_region: Tuple[float, float, float, float] = (0.15, 0.85, 0.4, 0.85)
    horizon: int = DEFAULT_HORIZON
    options: Tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class Observation:
    """
    Encoded observation.
    - features: fixed-size state vector (gripper, grip, object slots, goal)
    - caption: symbolic tokens the planner prompt is built from
    """
    features: np.ndarray
    caption: Tuple[str, ...]
    task_id: int
    held: bool

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.caption == other.caption
            and self.held == other.held
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self):
        return hash((self.task_id, self.caption))


@dataclass
class StepRecord:
    step: int
    observation: Observation
    action: ActionCommand
    state: SimState


@dataclass
class PlanRecord:
    step: int
    trajectory: Optional[Trajectory]
    fallback: bool = False
    reason: str = 'schedule'


@dataclass
class Episode:
    task_id: int
    seed: int
    initial_state: SimState
    records: List[StepRecord] = field(default_factory=list)
    success: bool = False
    failure_step: Optional[int] = None
    plans: List[PlanRecord] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.records)

    @property
    def final_state(self) -> SimState:
        return self.records[-1].state if self.records else self.initial_state

    @property
    def planner_calls(self) -> int:
        return len(self.plans)

    @property
    def fallbacks(self) -> int:
        return sum(1 for p in self.plans if p.fallback)

    def gripper_path(self) -> Trajectory:
        pts = [self.initial_state.gripper] + [r.state.gripper for r in self.records]
        return Trajectory(tuple(pts))

    def __repr__(self):
        return f"Episode(task={self.task_id}, seed={self.seed}, steps={len(self)}, success={self.success})"
