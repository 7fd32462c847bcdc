"""
Studies over trained models: reward ablation, replanning-interval ablation,
self-correction and few-shot adaptation to an unseen goal band.
"""
from __future__ import annotations

import datetime
import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from latent_plan_vla.api.sources.demos.demos import Demo, demo_seed, generate_demos
from latent_plan_vla.schemas.configs.config import RewardConfig, RunConfig
from latent_plan_vla.workflows.components.executor.runner import Agent, evaluate, run_episodes, summarize
from latent_plan_vla.workflows.components.grpo.trainer import GrpoComponent
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.components.planner.projector import LatentProjector
from latent_plan_vla.workflows.components.policy.diffusion import DiffusionPolicy
from latent_plan_vla.workflows.components.policy.imitation import ActionComponent

logger = logging.getLogger(__name__)

REWARD_VARIANTS = {
    'full': None,
    'no_traj': (1.0, 0.0),
    'no_goal': (0.0, 1.0),
    'no_both': (0.0, 0.0),
    'sft_only': None,
}
REWARD_REPORT_COLUMNS = ['variant', 'seeds', 'mean_r_visual', 'mean_r_total', 'mean_r_goal', 'mean_r_traj',
                         'mean_r_format', 'mean_dtw', 'success_rate']
N_REPORT_COLUMNS = ['actions_per_plan', 'episodes', 'success_rate', 'std_err']


def _variant_reward(name: str, base: RewardConfig) -> RewardConfig:
    pair = REWARD_VARIANTS[name]
    if pair is None:
        return base
    return RewardConfig(w_goal=pair[0], w_traj=pair[1], w_visual=base.w_visual, w_format=base.w_format)


def trainable_planner(model: PlannerModel) -> PlannerModel:
    return PlannerModel(model.cfg, model.vocab, params=model.params.clone())


#####################################
# Reward ablation
#####################################

def ablate_rewards(cfg: RunConfig, demos: Sequence[Demo], sft_model: PlannerModel,
                   variants: Optional[Sequence[str]] = None, seeds: Optional[Sequence[int]] = None,
                   downstream: Optional[bool] = None) -> Tuple[pd.DataFrame, Dict[str, bool]]:
    """
    Train one planner per (variant, seed) from the same cold start and
    evaluate every variant with the full reward. `sft_only` runs no GRPO
    iterations.

    Returns:
        (per-variant report averaged over seeds, ordering flags)
    """
    variants = list(variants) if variants is not None else list(cfg.ablation.reward_variants)
    seeds = list(seeds) if seeds is not None else list(cfg.ablation.seeds)
    downstream = cfg.ablation.downstream if downstream is None else downstream
    print(f"    Reward ablation over {variants} x seeds {seeds} {datetime.datetime.now()}")
    rows = []
    for seed in seeds:
        run_cfg = cfg.model_copy(update={'seed': seed})
        for name in variants:
            if name == 'sft_only':
                run_cfg_v = run_cfg.model_copy(update={'grpo': cfg.grpo.model_copy(update={'iterations': 0})})
            else:
                run_cfg_v = run_cfg
            model = trainable_planner(sft_model)
            component = GrpoComponent(run_cfg_v, demos, model, reward=_variant_reward(name, cfg.reward))
            component.run_pipeline()
            row = {'variant': name, 'seed': seed, **component.evaluation}
            if downstream:
                action = ActionComponent(run_cfg_v, demos, model)
                action.run_pipeline()
                agent = Agent(model, action.projector, action.policy, action.zero_plan, cfg.grpo.max_len)
                ex = cfg.executor.model_copy(update={'p_drop': cfg.ablation.p_drop})
                metrics = evaluate(agent, run_cfg_v, seeds=[seed], episodes=cfg.ablation.episodes, executor=ex)
                row['success_rate'] = float(metrics['success_rate'].mean())
            rows.append(row)
            logger.info("variant %s seed %d: r_visual %.4f", name, seed, row['mean_r_visual'])
    per_seed = pd.DataFrame(rows)
    if 'success_rate' not in per_seed.columns:
        per_seed['success_rate'] = np.nan
    metrics = [c for c in REWARD_REPORT_COLUMNS if c not in ('variant', 'seeds')]
    report = per_seed.groupby('variant', sort=False)[metrics].mean().reset_index()
    report.insert(1, 'seeds', len(seeds))
    return report[REWARD_REPORT_COLUMNS], reward_ordering(report)


def reward_ordering(report: pd.DataFrame) -> Dict[str, bool]:
    """Directional checks on mean r_visual; a check involving a missing variant is omitted."""
    r = dict(zip(report['variant'], report['mean_r_visual']))
    checks = {
        'full_ge_no_goal': ('full', 'no_goal'),
        'full_ge_no_traj': ('full', 'no_traj'),
        'no_goal_ge_no_both': ('no_goal', 'no_both'),
        'no_traj_ge_no_both': ('no_traj', 'no_both'),
        'no_both_ge_sft_only': ('no_both', 'sft_only'),
        'full_gt_no_both': ('full', 'no_both'),
    }
    out = {}
    for flag, (a, b) in checks.items():
        if a in r and b in r:
            out[flag] = bool(r[a] > r[b]) if flag.endswith('gt_no_both') else bool(r[a] >= r[b])
    return out


#####################################
# Replanning interval
#####################################

def ablate_n(agent: Agent, cfg: RunConfig, values: Optional[Sequence[int]] = None,
             seeds: Optional[Sequence[int]] = None, episodes: Optional[int] = None,
             p_drop: Optional[float] = None) -> Tuple[pd.DataFrame, Dict[str, bool]]:
    """
    Success per actions-per-plan value with failure injection, pooled over
    seeds. The window follows N.

    Returns:
        (report with N_REPORT_COLUMNS, {'sparsest_not_max': ...})
    """
    values = list(values) if values is not None else list(cfg.ablation.n_values)
    seeds = list(seeds) if seeds is not None else list(cfg.ablation.seeds)
    episodes = episodes if episodes is not None else cfg.ablation.episodes
    p_drop = cfg.ablation.p_drop if p_drop is None else p_drop
    print(f"    Replanning-interval ablation over N={values} {datetime.datetime.now()}")
    rows = []
    for n in values:
        ex = cfg.executor.model_copy(update={'actions_per_plan': n, 'window': None, 'p_drop': p_drop})
        successes = []
        for seed in seeds:
            for name in cfg.sim.train_tasks:
                successes += [ep.success for ep in run_episodes(agent, cfg, name, seed, episodes, ex)]
        p = float(np.mean(successes))
        rows.append({'actions_per_plan': n, 'episodes': len(successes), 'success_rate': p,
                     'std_err': math.sqrt(p * (1.0 - p) / len(successes))})
        logger.info("N=%d: success %.3f", n, p)
    report = pd.DataFrame(rows, columns=N_REPORT_COLUMNS)
    flags = {}
    if len(report) > 1:
        sparsest = report.loc[report['actions_per_plan'].idxmax(), 'success_rate']
        flags['sparsest_not_max'] = bool(sparsest < report['success_rate'].max())
    return report, flags


#####################################
# Self-correction
#####################################

def study_self_correction(agent: Agent, cfg: RunConfig, seeds: Optional[Sequence[int]] = None,
                          episodes: Optional[int] = None, p_drop: Optional[float] = None) -> Tuple[pd.DataFrame, float]:
    """
    Windowed replanning (plan every N and after a detected drop) against a
    single plan per episode, both under failure injection.

    Returns:
        (one summary row per (mode, seed), success gain in points)
    """
    seeds = list(seeds) if seeds is not None else list(cfg.executor.seeds)
    episodes = episodes if episodes is not None else cfg.executor.episodes
    p_drop = cfg.ablation.p_drop if p_drop is None else p_drop
    modes = {
        'single_plan': cfg.executor.model_copy(update={'actions_per_plan': cfg.executor.horizon,
                                                       'self_correct': False, 'p_drop': p_drop}),
        'self_correct': cfg.executor.model_copy(update={'self_correct': True, 'p_drop': p_drop}),
    }
    print(f"    Self-correction study {datetime.datetime.now()}")
    rows = []
    for mode, ex in modes.items():
        for seed in seeds:
            for name in cfg.sim.train_tasks:
                row = summarize(run_episodes(agent, cfg, name, seed, episodes, ex), seed, name, ex)
                rows.append({'mode': mode, **row})
    df = pd.DataFrame(rows)
    rates = df.groupby('mode')['success_rate'].mean()
    gain = 100.0 * float(rates['self_correct'] - rates['single_plan'])
    logger.info("self-correction gain: %.1f points", gain)
    return df, gain


#####################################
# Few-shot adaptation
#####################################

def adapt_few_shot(agent: Agent, cfg: RunConfig, task_name: Optional[str] = None, n_demos: Optional[int] = None,
                   steps: Optional[int] = None, episodes: int = 100) -> Tuple[Agent, pd.DataFrame, pd.DataFrame]:
    """
    Fine-tune copies of the policy and projector on a few expert demos of a
    new task (plans cached from the frozen planner), then evaluate on it.

    Returns:
        (adapted agent, imitation log, evaluation summary)
    """
    task_name = task_name if task_name is not None else cfg.sim.few_shot_task
    n_demos = n_demos if n_demos is not None else cfg.imitation.few_shot_demos
    steps = steps if steps is not None else cfg.imitation.few_shot_steps
    demos = generate_demos([task_name], n_demos, demo_seed(cfg.seed, 104_729), horizon=cfg.sim.horizon,
                           max_retries=cfg.sim.max_retries)
    policy = DiffusionPolicy(agent.policy.cfg, agent.policy.plan_dim, params=agent.policy.params.clone())
    projector = LatentProjector(cfg.model, params=agent.projector.params.clone())
    component = ActionComponent(cfg, demos, agent.planner, policy=policy, projector=projector,
                                zero_plan=agent.zero_plan)
    log = component.run_pipeline(steps=steps)
    adapted = Agent(agent.planner, projector, policy, agent.zero_plan, agent.max_len)
    metrics = evaluate(adapted, cfg, task_names=[task_name], seeds=[cfg.seed], episodes=episodes)
    return adapted, log, metrics
