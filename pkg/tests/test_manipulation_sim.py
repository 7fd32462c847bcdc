import numpy as np
import pytest

from latent_plan_vla.api.sources.sim.expert import expert_action, expert_rollout
from latent_plan_vla.api.sources.sim.manipulation import (
    ManipulationEnv, coord_bin, inject_failure, state_features, state_from_features, step, success,
)
from latent_plan_vla.api.sources.sim.tasks import get_task, sample_initial_state, task_for_instruction
from latent_plan_vla.schemas.episodes.episode import ActionCommand, ObjectState, SimState, TaskSpec
from latent_plan_vla.schemas.general.errors import DomainError, TaskSamplingError
from latent_plan_vla.schemas.trajectories.trajectory import Point2D

OPEN, CLOSE = -1.0, 1.0


def _state(gripper, block, closed=False, goal=(0.5, 0.8)):
    return SimState(gripper=Point2D(*gripper), grip_closed=closed,
                    objects=(ObjectState(position=Point2D(*block)),), goal=Point2D(*goal))


def _run_expert(env):
    while not env.done:
        env.step(expert_action(env.state, env.task))
    return env.episode


def test_zero_action_keeps_position():
    s = _state((0.3, 0.3), (0.6, 0.3))
    nxt = step(s, ActionCommand(0.0, 0.0, OPEN))
    assert nxt.gripper == s.gripper
    assert nxt.objects == s.objects
    assert nxt.step == 1


def test_close_far_from_block_does_not_attach():
    nxt = step(_state((0.2, 0.2), (0.7, 0.2)), ActionCommand(0.0, 0.0, CLOSE))
    assert nxt.grip_closed
    assert nxt.held_index is None


def test_grasp_and_carry():
    s = step(_state((0.6, 0.3), (0.62, 0.3)), ActionCommand(0.0, 0.0, CLOSE))
    assert s.held_index == 0
    s = step(s, ActionCommand(0.05, 0.0, CLOSE))
    assert s.gripper.x == pytest.approx(0.65)
    assert s.objects[0].position == s.gripper


def test_moves_are_clipped():
    s = step(_state((0.99, 0.5), (0.2, 0.2)), ActionCommand(0.5, -0.5, OPEN))
    assert s.gripper.x == 1.0
    assert s.gripper.y == pytest.approx(0.45)


def test_release_inside_goal_succeeds():
    task = get_task('red-to-tray')
    s = step(_state((0.5, 0.8), (0.5, 0.8), goal=(0.5, 0.8)), ActionCommand(0.0, 0.0, CLOSE))
    assert not success(s, task)
    s = step(s, ActionCommand(0.0, 0.0, OPEN))
    assert success(s, task)


def test_held_block_sits_at_gripper():
    with pytest.raises(DomainError):
        SimState(gripper=Point2D(0.1, 0.1), grip_closed=True,
                 objects=(ObjectState(position=Point2D(0.5, 0.5), held=True),), goal=Point2D(0.5, 0.8))


def test_point_outside_unit_square():
    with pytest.raises(DomainError):
        Point2D(1.2, 0.5)


def test_coord_bin():
    assert coord_bin(0.5) == 32
    assert coord_bin(1.0) == 63
    assert coord_bin(0.0) == 0


def test_state_features_round_trip():
    s = _state((0.3, 0.4), (0.6, 0.2))
    assert state_from_features(state_features(s)) == s


def test_unknown_task_and_instruction():
    with pytest.raises(DomainError):
        get_task('stack-everything')
    with pytest.raises(DomainError):
        task_for_instruction('juggle the blocks')


def test_sampling_gives_up():
    rng = np.random.default_rng(0)
    with pytest.raises(TaskSamplingError):
        # goal region inside the object region with no room to separate
        task = TaskSpec(task_id=0, name='x', instruction='x', object_region=(0.5, 0.5, 0.5, 0.5),
                        goal_region=(0.5, 0.5, 0.5, 0.5))
        sample_initial_state(task, rng, max_retries=5)


def test_reset_is_deterministic():
    env = ManipulationEnv(get_task('blue-to-tray'))
    a = env.reset(3)
    b = env.reset(3)
    assert a == b
    assert env.reset(4) != a


@pytest.mark.parametrize('name', ['red-to-tray', 'blue-to-tray', 'red-to-bin'])
def test_expert_solves_every_seed(name):
    task = get_task(name)
    solved = 0
    for seed in range(100):
        env = ManipulationEnv(task)
        env.reset(seed, state=sample_initial_state(task, np.random.default_rng(seed), start_held=False))
        solved += _run_expert(env).success
    assert solved == 100


def test_expert_rollout_path_matches_episode():
    episode, path = expert_rollout(get_task('red-to-tray'), seed=0)
    assert episode.success
    assert len(path) == len(episode) + 1
    assert path.end == episode.final_state.gripper


def test_no_drops_without_failure_injection():
    env = ManipulationEnv(get_task('red-to-tray'), p_drop=0.0)
    env.reset(0)
    assert _run_expert(env).failure_step is None


def test_certain_drop_on_first_carry_step():
    env = ManipulationEnv(get_task('red-to-tray'), p_drop=1.0, horizon=60)
    env.reset(0)
    episode = _run_expert(env)
    assert episode.failure_step is not None
    assert not episode.success
    grasp = next(r.step for r in episode.records if r.action.closed)
    assert episode.failure_step == grasp + 1


def test_forced_drop_fires_once():
    env = ManipulationEnv(get_task('red-to-tray'), forced_drop_step=0)
    env.reset(0)
    episode = _run_expert(env)
    assert episode.failure_step is not None
    assert episode.success


def test_inject_failure_consumes_draws_only_when_holding():
    free = _state((0.3, 0.3), (0.6, 0.3))
    rng = np.random.default_rng(0)
    out, dropped = inject_failure(free, 1.0, rng)
    assert out is free and not dropped
    assert rng.random() == np.random.default_rng(0).random()


def _holding():
    block = ObjectState(position=Point2D(0.4, 0.4), held=True)
    return SimState(gripper=Point2D(0.4, 0.4), grip_closed=True, objects=(block,), goal=Point2D(0.5, 0.8))


def test_inject_failure_returns_state_and_flag():
    held = _holding()
    out, dropped = inject_failure(held, 1.0, np.random.default_rng(0))
    assert dropped
    assert isinstance(out, SimState)
    assert out.held_index is None and not out.grip_closed
    assert out.objects[0].position == held.gripper
    kept, dropped = inject_failure(held, 0.0, np.random.default_rng(0))
    assert kept is held and not dropped


def test_inject_failure_drop_frequency():
    n, p = 10000, 0.3
    held = _holding()
    rng = np.random.default_rng(11)
    drops = sum(inject_failure(held, p, rng)[1] for _ in range(n))
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(drops - n * p) <= 4 * sigma


@pytest.mark.parametrize('name', ['red-to-tray', 'blue-to-tray'])
def test_random_rollouts_stay_in_workspace(name):
    task = get_task(name)
    for seed in range(10):
        rng = np.random.default_rng([seed, 5])
        env = ManipulationEnv(task, p_drop=0.2, horizon=150)
        env.reset(seed)
        while not env.done:
            if rng.random() < 0.5:
                action = expert_action(env.state, env.task)
            else:
                action = ActionCommand.from_array([*rng.uniform(-0.2, 0.2, size=2), rng.choice([OPEN, CLOSE])])
            env.step(action)
            s = env.state
            coords = [s.gripper.x, s.gripper.y] + [c for o in s.objects for c in (o.position.x, o.position.y)]
            assert all(0.0 <= c <= 1.0 for c in coords)
            held = [o for o in s.objects if o.held]
            assert len(held) <= 1
            if held:
                assert s.grip_closed and held[0].position == s.gripper


def test_window_returns_oldest_mid_current():
    env = ManipulationEnv(get_task('red-to-tray'))
    env.reset(0)
    for _ in range(6):
        env.step(ActionCommand(0.01, 0.0, OPEN))
    oldest, mid, current = env.window(4)
    assert oldest == env.history[-5]
    assert mid == env.history[-3]
    assert current == env.history[-1]
