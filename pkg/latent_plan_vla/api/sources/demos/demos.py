"""
Training data built from the scripted expert.

    generate_demos      seeded expert episodes with their dense gripper paths
    planning_examples   (prompt, expert response, reference keypoints) from demo start frames
    drop_examples       post-drop recovery examples for the windowed planner
    qa_examples         multiple-choice questions about the gripper
"""
from __future__ import annotations

import datetime
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from latent_plan_vla.api.sources.sim.expert import expert_continuation, expert_rollout
from latent_plan_vla.api.sources.sim.manipulation import drop_held, observe
from latent_plan_vla.api.sources.sim.tasks import TASKS_BY_ID, get_task, sample_initial_state
from latent_plan_vla.schemas.configs.config import SftConfig
from latent_plan_vla.schemas.episodes.episode import Episode, SimState, TaskSpec
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import NUM_KEYPOINTS, OPTION_LETTERS, TaskKind
from latent_plan_vla.schemas.trajectories.trajectory import Trajectory
from latent_plan_vla.utils.formatters.general import render_response, render_trajectory
from latent_plan_vla.workflows.components.planner.model import encode_prompt, encode_window_prompt
from latent_plan_vla.workflows.components.planner.vocab import TokenVocab
from latent_plan_vla.workflows.transforms.geometry.traj_geom import keypoints, subsample_starts

logger = logging.getLogger(__name__)

Demo = Tuple[Episode, Trajectory]


@dataclass
class PlanningExample:
    """
    One planner training/evaluation item.
    - reference set for trajectory prompts, gold set for choice prompts
    - response holds the expert token ids (EOS included)
    """
    prompt: np.ndarray
    response: np.ndarray
    text: str
    task: str
    reference: Optional[Trajectory] = None
    gold: Optional[str] = None
    window: bool = False
    episode: int = -1
    start: int = 0


def demo_seed(seed: int, i: int) -> int:
    return seed * 1_000_003 + i


def generate_demos(task_names: Sequence[str], n: int, seed: int, horizon: Optional[int] = None,
                   max_retries: int = 100) -> List[Demo]:
    """n expert episodes, cycling through task_names."""
    print(f"    Loading expert demos {datetime.datetime.now()}")
    tasks = [get_task(name) for name in task_names]
    if not tasks:
        raise DomainError("no tasks to generate demos for")
    demos = []
    for i in range(n):
        task = tasks[i % len(tasks)]
        demos.append(expert_rollout(task, demo_seed(seed, i), horizon=horizon, max_retries=max_retries))
    logger.info("generated %d expert demos over %s", len(demos), list(task_names))
    return demos


# -----------------------------------------------------------
# Templated reasoning
# -----------------------------------------------------------

def _place(task: TaskSpec) -> str:
    return task.instruction.rsplit(' ', 1)[-1]


def reasoning_for(state: SimState, task: TaskSpec, dropped: bool = False) -> str:
    colour = state.objects[task.target_index].colour
    if dropped:
        return f"the {colour} block dropped so replan reach it again then carry to {_place(task)} then release"
    if state.objects[task.target_index].held:
        return f"holding the {colour} block carry to {_place(task)} then release"
    return f"reach the {colour} block then grasp it and carry to {_place(task)} then release"


def quantize_trajectory(traj: Trajectory, vocab: TokenVocab) -> Trajectory:
    return Trajectory.from_xy(
        (vocab.coord_value(vocab.coord_id(p.x)), vocab.coord_value(vocab.coord_id(p.y))) for p in traj)


def trajectory_response(reasoning: str, reference: Trajectory, vocab: TokenVocab) -> Tuple[str, np.ndarray]:
    text = render_response(reasoning, render_trajectory(quantize_trajectory(reference, vocab)))
    return text, vocab.as_array(vocab.tokenize(text) + [vocab.eos_id])


def _states(episode: Episode) -> List[SimState]:
    return [episode.initial_state] + [r.state for r in episode.records]


def _window_states(states: List[SimState], current: int, length: int) -> Tuple[SimState, SimState, SimState]:
    oldest = max(0, current - length)
    return states[oldest], states[(oldest + current) // 2], states[current]


# -----------------------------------------------------------
# Builders
# -----------------------------------------------------------

def planning_examples(demos: Sequence[Demo], vocab: TokenVocab, starts_per_demo: int, seed: int,
                      k: int = NUM_KEYPOINTS, window_fraction: float = 0.0, window_length: int = 15) -> List[PlanningExample]:
    """
    Prompts from subsampled demo start frames. The reference is the K-keypoint
    simplification of the remaining demo path.
    """
    rng = np.random.default_rng(seed)
    out = []
    for e, (episode, path) in enumerate(demos):
        task = TASKS_BY_ID[episode.task_id]
        states = _states(episode)
        n = min(starts_per_demo, len(path) - k + 1, len(path) - 1)
        if n < 1:
            continue
        for s in subsample_starts(len(path), n, rng_seed=demo_seed(seed, e), k=k):
            reference = keypoints(Trajectory(path.points[s:]), k)
            text, response = trajectory_response(reasoning_for(states[s], task), reference, vocab)
            windowed = bool(rng.random() < window_fraction)
            if windowed:
                window = [observe(st, task.task_id, vocab.coord_bins)
                          for st in _window_states(states, s, window_length)]
                prompt = encode_window_prompt(window, task.instruction, vocab)
            else:
                prompt = encode_prompt(observe(states[s], task.task_id, vocab.coord_bins), task.instruction, vocab)
            out.append(PlanningExample(prompt=prompt, response=response, text=text, task=task.name,
                                       reference=reference, window=windowed, episode=e, start=s))
    return out


def drop_examples(demos: Sequence[Demo], vocab: TokenVocab, n: int, seed: int, k: int = NUM_KEYPOINTS,
                  window_length: int = 15, horizon: int = 120) -> List[PlanningExample]:
    """Window prompts right after a block falls, answered with the expert's recovery path."""
    rng = np.random.default_rng(seed)
    out = []
    carrying = [(e, d) for e, d in enumerate(demos) if any(r.state.held_index is not None for r in d[0].records)]
    if not carrying:
        return out
    for j in range(n):
        e, (episode, _) = carrying[int(rng.integers(len(carrying)))]
        task = TASKS_BY_ID[episode.task_id]
        states = _states(episode)
        carry = [i for i, st in enumerate(states) if st.held_index is not None]
        c = carry[int(rng.integers(len(carry)))]
        dropped = drop_held(states[c])
        history = states[:c] + [dropped]
        recovery = expert_continuation(dropped, task, horizon)
        reference = keypoints(recovery, k)
        text, response = trajectory_response(reasoning_for(dropped, task, dropped=True), reference, vocab)
        window = [observe(st, task.task_id, vocab.coord_bins) for st in _window_states(history, c, window_length)]
        out.append(PlanningExample(prompt=encode_window_prompt(window, task.instruction, vocab), response=response,
                                   text=text, task=task.name, reference=reference, window=True, episode=e, start=c))
    return out


def qa_answer(state: SimState, task: TaskSpec) -> Tuple[str, str]:
    """(reasoning, gold option letter) for a choice task."""
    target = state.objects[task.target_index]
    colour = target.colour
    if task.name == 'grasp-check':
        if target.held:
            return f"the gripper is holding the {colour} block so yes", OPTION_LETTERS[0]
        return "the gripper is empty so no", OPTION_LETTERS[1]
    dx = target.position.x - state.gripper.x
    dy = target.position.y - state.gripper.y
    if abs(dx) >= abs(dy):
        side = 'left' if dx < 0 else 'right'
    else:
        side = 'above' if dy > 0 else 'below'
    return f"the {colour} block is {side} so {side}", OPTION_LETTERS[task.options.index(side)]


def qa_examples(task_names: Sequence[str], vocab: TokenVocab, n: int, seed: int,
                max_retries: int = 100) -> List[PlanningExample]:
    rng = np.random.default_rng(seed)
    tasks = [get_task(name) for name in task_names]
    out = []
    if not tasks:
        return out
    for i in range(n):
        task = tasks[i % len(tasks)]
        if task.kind is not TaskKind.CHOICE:
            raise DomainError(f"{task.name} is not a choice task")
        state = sample_initial_state(task, rng, max_retries)
        reasoning, gold = qa_answer(state, task)
        text = render_response(reasoning, gold)
        response = vocab.as_array(vocab.tokenize(text) + [vocab.eos_id])
        prompt = encode_prompt(observe(state, task.task_id, vocab.coord_bins), task.instruction, vocab)
        out.append(PlanningExample(prompt=prompt, response=response, text=text, task=task.name, gold=gold))
    return out


def sft_corpus(demos: Sequence[Demo], vocab: TokenVocab, cfg: SftConfig, qa_tasks: Sequence[str], seed: int,
               k: int = NUM_KEYPOINTS, window_length: int = 15, horizon: int = 120) -> List[PlanningExample]:
    """Everything the cold start trains on: demo starts, drop recoveries and QA items."""
    examples = planning_examples(demos, vocab, cfg.starts_per_demo, seed, k, cfg.window_fraction, window_length)
    n_drop = int(round(cfg.drop_fraction * len(examples)))
    examples += drop_examples(demos, vocab, n_drop, seed + 1, k, window_length, horizon)
    examples += qa_examples(qa_tasks, vocab, cfg.qa_items, seed + 2)
    logger.info("sft corpus: %d examples", len(examples))
    return examples
