"""
Plan-every-N executor.

The planner runs at steps t = 0 (mod N), the action policy every step from
its receding-horizon chunk. "Asynchronous" is an interleaving contract, not
threads: the planner call at a boundary completes before the step executes.
"""
from __future__ import annotations

import datetime
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from latent_plan_vla.api.sources.demos.demos import demo_seed
from latent_plan_vla.api.sources.sim.manipulation import ManipulationEnv
from latent_plan_vla.api.sources.sim.tasks import get_task
from latent_plan_vla.schemas.configs.config import ExecutorConfig, RunConfig
from latent_plan_vla.schemas.episodes.episode import ActionCommand, Episode, Observation, PlanRecord
from latent_plan_vla.schemas.general.general import PayloadKind
from latent_plan_vla.workflows.components.planner.decoding import greedy_response
from latent_plan_vla.workflows.components.planner.model import PlannerModel, encode_prompt, encode_window_prompt
from latent_plan_vla.workflows.components.planner.parsing import parse_response
from latent_plan_vla.workflows.components.planner.projector import LatentProjector, pool_plan
from latent_plan_vla.workflows.components.policy.diffusion import DiffusionPolicy, StateFeatures, ddim_sample
from latent_plan_vla.workflows.transforms.general.averages import rolling_success

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 500_000
METRIC_COLUMNS = ['seed', 'task', 'episodes', 'actions_per_plan', 'self_correct', 'p_drop', 'success_rate',
                  'std_err', 'mean_steps', 'mean_planner_calls', 'fallback_rate']


@dataclass
class Agent:
    """Everything the executor needs to act: frozen planner, projector and policy."""
    planner: PlannerModel
    projector: LatentProjector
    policy: DiffusionPolicy
    zero_plan: bool = False
    max_len: int = 96


def drop_detected(prev: Observation, cur: Observation) -> bool:
    """Held flag went from held to free while the gripper is outside the goal."""
    if not prev.held or cur.held:
        return False
    f = cur.features
    return math.hypot(f[0] - f[-3], f[1] - f[-2]) > f[-1]


def _plan(agent: Agent, prompt: np.ndarray):
    tokens = greedy_response(agent.planner, prompt, agent.max_len)
    parsed = parse_response(tokens, agent.planner.vocab, agent.planner.cfg.num_keypoints)
    if parsed.payload_kind is not PayloadKind.TRAJECTORY:
        return parsed, None
    hidden = agent.planner.response_hidden(prompt, tokens)
    return parsed, pool_plan(agent.projector(hidden)).data


def run_episode(agent: Agent, env: ManipulationEnv, cfg: ExecutorConfig, seed: int = 0) -> Episode:
    """
    Drive one reset environment to termination.

    - plans at t = 0 (mod N); in self-correct mode from the (oldest, mid,
      current) observation window, and also right after a detected drop
    - an unparseable plan keeps the previous latent (zeros before the first)
    - a new plan discards the rest of the current action chunk
    """
    n = cfg.actions_per_plan
    d = agent.policy.plan_dim
    instruction = env.task.instruction
    vocab = agent.planner.vocab
    latent: Optional[np.ndarray] = None
    chunk, pos = None, 0
    timings = {'planner_s': 0.0, 'policy_s': 0.0}
    while not env.done:
        t = env.state.step
        obs = env.history[-1]
        reason = None
        if t % n == 0:
            reason = 'schedule'
        elif cfg.self_correct and len(env.history) > 1 and drop_detected(env.history[-2], obs):
            reason = 'drop'
        if reason is not None:
            t0 = time.perf_counter()
            if cfg.self_correct:
                prompt = encode_window_prompt(env.window(cfg.window_length), instruction, vocab)
            else:
                prompt = encode_prompt(obs, instruction, vocab)
            parsed, new_latent = _plan(agent, prompt)
            if new_latent is None:
                logger.warning("unparseable plan at step %d, keeping the previous latent", t)
                latent = latent if latent is not None else np.zeros(d)
                env.episode.plans.append(PlanRecord(step=t, trajectory=None, fallback=True, reason=reason))
            else:
                latent = new_latent
                env.episode.plans.append(PlanRecord(step=t, trajectory=parsed.trajectory, reason=reason))
            chunk = None
            timings['planner_s'] += time.perf_counter() - t0
        if chunk is None or pos >= len(chunk):
            t0 = time.perf_counter()
            conditioning = np.zeros(d) if agent.zero_plan else latent
            chunk = ddim_sample(agent.policy, StateFeatures.from_observation(obs), conditioning,
                                seed=demo_seed(seed, t))
            pos = 0
            timings['policy_s'] += time.perf_counter() - t0
        env.step(ActionCommand.from_array(chunk[pos], env.max_step))
        pos += 1
    env.episode.timings = timings
    return env.episode


def _eval_one(agent: Agent, cfg: RunConfig, ex: ExecutorConfig, task_name: str, seed: int, i: int) -> Episode:
    env = ManipulationEnv(get_task(task_name), p_drop=ex.p_drop, forced_drop_step=ex.forced_drop_step,
                          horizon=ex.horizon, max_step=cfg.diffusion.max_step, max_retries=cfg.sim.max_retries,
                          bins=cfg.model.coord_bins)
    ep_seed = demo_seed(seed, EVAL_SEED_OFFSET + i)
    env.reset(ep_seed)
    return run_episode(agent, env, ex, seed=ep_seed)


def run_episodes(agent: Agent, cfg: RunConfig, task_name: str, seed: int, episodes: int,
                 executor: Optional[ExecutorConfig] = None) -> List[Episode]:
    """Independent seeded episodes, fanned out over `executor.workers` threads, returned in order."""
    ex = executor if executor is not None else cfg.executor
    if ex.workers > 1:
        with ThreadPoolExecutor(max_workers=ex.workers) as pool:
            return list(pool.map(lambda i: _eval_one(agent, cfg, ex, task_name, seed, i), range(episodes)))
    return [_eval_one(agent, cfg, ex, task_name, seed, i) for i in range(episodes)]


def episode_frame(episodes: Sequence[Episode]) -> pd.DataFrame:
    rows = [{
        'episode': i,
        'seed': ep.seed,
        'success': int(ep.success),
        'steps': len(ep),
        'planner_calls': ep.planner_calls,
        'fallbacks': ep.fallbacks,
        'failure_step': -1 if ep.failure_step is None else ep.failure_step,
    } for i, ep in enumerate(episodes)]
    df = pd.DataFrame(rows)
    if len(df):
        df['rolling_success'] = rolling_success(df['success'].values).values
    return df


def summarize(episodes: Sequence[Episode], seed: int, task_name: str, ex: ExecutorConfig) -> dict:
    """Deterministic summary row; wall times are logged, never returned."""
    df = episode_frame(episodes)
    n = len(df)
    p = float(df['success'].mean())
    calls = float(df['planner_calls'].sum())
    planner_s = sum(ep.timings.get('planner_s', 0.0) for ep in episodes)
    policy_s = sum(ep.timings.get('policy_s', 0.0) for ep in episodes)
    total = planner_s + policy_s
    if total > 0:
        logger.info("time split: planner %.1f%%, policy %.1f%%", 100 * planner_s / total, 100 * policy_s / total)
    return {
        'seed': seed,
        'task': task_name,
        'episodes': n,
        'actions_per_plan': ex.actions_per_plan,
        'self_correct': bool(ex.self_correct),
        'p_drop': ex.p_drop,
        'success_rate': p,
        'std_err': math.sqrt(p * (1.0 - p) / n) if n else 0.0,
        'mean_steps': float(df['steps'].mean()),
        'mean_planner_calls': float(df['planner_calls'].mean()),
        'fallback_rate': float(df['fallbacks'].sum()) / calls if calls else 0.0,
    }


def evaluate(agent: Agent, cfg: RunConfig, task_names: Optional[Sequence[str]] = None,
             seeds: Optional[Sequence[int]] = None, episodes: Optional[int] = None,
             executor: Optional[ExecutorConfig] = None) -> pd.DataFrame:
    """One summary row per (seed, task), METRIC_COLUMNS order."""
    ex = executor if executor is not None else cfg.executor
    task_names = list(task_names) if task_names is not None else list(cfg.sim.train_tasks)
    seeds = list(seeds) if seeds is not None else list(ex.seeds)
    episodes = episodes if episodes is not None else ex.episodes
    print(f"    Evaluating {len(seeds)} seeds x {episodes} episodes {datetime.datetime.now()}")
    rows = []
    for seed in seeds:
        for name in task_names:
            eps = run_episodes(agent, cfg, name, seed, episodes, ex)
            rows.append(summarize(eps, seed, name, ex))
            logger.info("seed %d %s: success %.3f", seed, name, rows[-1]['success_rate'])
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


class EvaluationComponent:
    """Loads nothing itself: wraps an Agent and a config, runs evaluate() and keeps the episodes for traces."""

    def __init__(self, cfg: RunConfig, agent: Agent, executor: Optional[ExecutorConfig] = None):
        self.cfg = cfg
        self.agent = agent
        self.executor = executor if executor is not None else cfg.executor
        self.db = self.extract()
        self.metrics: Optional[pd.DataFrame] = None

    def extract(self):
        return {'tasks': list(self.cfg.sim.train_tasks), 'seeds': list(self.executor.seeds)}

    def run_pipeline(self) -> pd.DataFrame:
        self.metrics = evaluate(self.agent, self.cfg, self.db['tasks'], self.db['seeds'], executor=self.executor)
        return self.metrics

    def trace_episodes(self, episodes: int, seed: Optional[int] = None) -> List[Episode]:
        seed = self.db['seeds'][0] if seed is None else seed
        return run_episodes(self.agent, self.cfg, self.db['tasks'][0], seed, episodes, self.executor)
