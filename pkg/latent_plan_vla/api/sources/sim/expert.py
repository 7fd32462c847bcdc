from __future__ import annotations

import logging
import math
from typing import Tuple

import numpy as np

from latent_plan_vla.api.sources.sim.manipulation import ManipulationEnv, step, success
from latent_plan_vla.api.sources.sim.tasks import sample_initial_state
from latent_plan_vla.schemas.episodes.episode import ActionCommand, Episode, SimState, TaskSpec
from latent_plan_vla.schemas.general.errors import TaskSamplingError
from latent_plan_vla.schemas.general.general import MAX_STEP
from latent_plan_vla.schemas.trajectories.trajectory import Point2D, Trajectory

logger = logging.getLogger(__name__)

ARRIVE_TOL = 1e-9
OPEN, CLOSE = -1.0, 1.0


def _toward(src: Point2D, dst: Point2D, max_step: float, gain: float = 1.0) -> Tuple[float, float]:
    dx = float(np.clip(gain * (dst.x - src.x), -max_step, max_step))
    dy = float(np.clip(gain * (dst.y - src.y), -max_step, max_step))
    return dx, dy


def expert_action(state: SimState, task: TaskSpec, max_step: float = MAX_STEP) -> ActionCommand:
    """
    Proportional controller over four phases: approach the target with the grip
    open, close on it, carry it to the goal centre, open.
    """
    target = state.objects[task.target_index]
    if target.held:
        if math.hypot(state.gripper.x - state.goal.x, state.gripper.y - state.goal.y) > ARRIVE_TOL:
            return ActionCommand(*_toward(state.gripper, state.goal, max_step), CLOSE)
        return ActionCommand(0.0, 0.0, OPEN)
    if state.grip_closed:
        # holding nothing: open in place before the next grasp
        return ActionCommand(0.0, 0.0, OPEN)
    if math.hypot(state.gripper.x - target.position.x, state.gripper.y - target.position.y) > ARRIVE_TOL:
        return ActionCommand(*_toward(state.gripper, target.position, max_step), OPEN)
    return ActionCommand(0.0, 0.0, CLOSE)


def expert_continuation(state: SimState, task: TaskSpec, horizon: int, max_step: float = MAX_STEP) -> Trajectory:
    """Dense gripper path of the expert from `state`, no failures injected."""
    pts = [state.gripper]
    s = state
    for _ in range(horizon):
        if success(s, task):
            break
        s = step(s, expert_action(s, task, max_step), max_step=max_step)
        pts.append(s.gripper)
    return Trajectory(tuple(pts))


def expert_rollout(task: TaskSpec, seed: int, horizon: int = None, max_step: float = MAX_STEP,
                   max_retries: int = 100) -> Tuple[Episode, Trajectory]:
    """
    Run the scripted expert on a seeded task.

    Unsolved draws are resampled from the same generator up to `max_retries` times.

    Returns:
        (episode, dense gripper path including the initial position)
    """
    horizon = horizon if horizon is not None else task.horizon
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        initial = sample_initial_state(task, rng, max_retries, start_held=False)
        env = ManipulationEnv(task, horizon=horizon, max_step=max_step)
        env.reset(seed, state=initial)
        while not env.done:
            env.step(expert_action(env.state, task, max_step))
        if env.episode.success:
            return env.episode, env.episode.gripper_path()
        logger.debug("expert failed %s seed %d attempt %d, resampling", task.name, seed, attempt)
    raise TaskSamplingError(f"expert could not solve {task.name} (seed {seed}) in {max_retries} draws")
