from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import PayloadKind


@dataclass(frozen=True)
class Point2D:
    """
    Workspace-normalised gripper position.
    - x: horizontal, y: vertical, both in [0, 1]
    """
    x: float
    y: float

    def __post_init__(self):
        for name, v in (('x', self.x), ('y', self.y)):
            if not math.isfinite(v) or v < 0.0 or v > 1.0:
                raise DomainError(f"Point2D.{name}={v!r} is outside [0, 1]")

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Trajectory:
    """Ordered, non-empty list of Point2D."""
    points: Tuple[Point2D, ...]

    def __post_init__(self):
        if len(self.points) == 0:
            raise DomainError("Trajectory needs at least one point")
        object.__setattr__(self, 'points', tuple(self.points))

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]

    def __iter__(self):
        return iter(self.points)

    @classmethod
    def from_xy(cls, xy: Iterable[Sequence[float]]) -> 'Trajectory':
        return cls(tuple(Point2D(float(x), float(y)) for x, y in xy))

    def as_array(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.points], dtype=np.float64)

    @property
    def start(self) -> Point2D:
        return self.points[0]

    @property
    def end(self) -> Point2D:
        return self.points[-1]


@dataclass(frozen=True)
class ParsedResponse:
    """
    Result of applying the response grammar to a planner output.
    - payload_kind INVALID when the answer is absent or malformed
    - trajectory set iff payload_kind is TRAJECTORY (exactly K in-range points)
    - option set iff payload_kind is CHOICE
    """
    text: str
    reasoning: str = ''
    format_ok: bool = False
    payload_kind: PayloadKind = PayloadKind.INVALID
    trajectory: Optional[Trajectory] = None
    option: Optional[str] = None

    @property
    def valid(self) -> bool:
        return self.payload_kind is not PayloadKind.INVALID


@dataclass(frozen=True)
class RewardBreakdown:
    r_goal: float = 0.0
    r_traj: float = 0.0
    r_format: float = 0.0
    r_visual: float = 0.0
    r_total: float = 0.0
    kind: str = 'trajectory'
    extras: dict = field(default_factory=dict, compare=False)

    def to_record(self, prefix: str = '') -> dict:
        return {
            f'{prefix}r_goal': self.r_goal,
            f'{prefix}r_traj': self.r_traj,
            f'{prefix}r_format': self.r_format,
            f'{prefix}r_visual': self.r_visual,
            f'{prefix}r_total': self.r_total,
        }
