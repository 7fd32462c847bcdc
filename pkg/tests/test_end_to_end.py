"""
Directional end-to-end runs on the desk-scale configuration. Deselected by
default; run with `pytest -m slow`.
"""
from pathlib import Path

import pytest

from latent_plan_vla.api.sources.demos.demos import generate_demos
from latent_plan_vla.schemas.configs.config import load_config
from latent_plan_vla.workflows.components.executor.ablations import ablate_n, study_self_correction, trainable_planner
from latent_plan_vla.workflows.components.executor.runner import Agent, evaluate
from latent_plan_vla.workflows.components.grpo.trainer import GrpoComponent
from latent_plan_vla.workflows.components.planner.sft import PlannerSftComponent
from latent_plan_vla.workflows.components.policy.imitation import ActionComponent

pytestmark = pytest.mark.slow

DEFAULT_TOML = Path(__file__).resolve().parents[1] / 'configs' / 'default.toml'


@pytest.fixture(scope='module')
def cfg():
    cfg = load_config(DEFAULT_TOML)
    return cfg.model_copy(update={'train': cfg.train.model_copy(update={'progress': False})})


@pytest.fixture(scope='module')
def demos(cfg):
    return generate_demos(cfg.sim.train_tasks, cfg.sft.demos, cfg.seed, horizon=cfg.sim.horizon)


@pytest.fixture(scope='module')
def sft(cfg, demos):
    component = PlannerSftComponent(cfg, demos)
    component.run_pipeline()
    return component


@pytest.fixture(scope='module')
def rl(cfg, demos, sft):
    component = GrpoComponent(cfg, demos, trainable_planner(sft.model))
    component.run_pipeline()
    return component


@pytest.fixture(scope='module')
def agent(cfg, demos, rl):
    action = ActionComponent(cfg, demos[:cfg.imitation.demos], rl.model)
    action.run_pipeline()
    return Agent(rl.model, action.projector, action.policy, action.zero_plan, cfg.grpo.max_len)


def test_cold_start_learns_the_format(sft):
    assert sft.db['held_out']
    assert sft.held_out_format_rate >= 0.9


def test_rl_raises_visual_reward(rl):
    assert rl.evaluation['mean_r_visual'] >= 0.7
    assert rl.log['mean_r_visual_ewma'].iloc[-1] >= rl.log['mean_r_visual_ewma'].iloc[0]


def test_latent_plans_carry_information(cfg, demos, rl, agent):
    seeds = list(cfg.executor.seeds)
    with_plan = evaluate(agent, cfg, seeds=seeds)['success_rate'].mean()
    control = ActionComponent(cfg, demos[:cfg.imitation.demos], rl.model, zero_plan=True)
    control.run_pipeline()
    blind = Agent(rl.model, control.projector, control.policy, True, cfg.grpo.max_len)
    without = evaluate(blind, cfg, seeds=seeds)['success_rate'].mean()
    assert with_plan >= 0.8
    assert with_plan - without >= 0.1


def test_sparsest_replanning_is_not_best(cfg, agent):
    _, flags = ablate_n(agent, cfg)
    assert flags['sparsest_not_max']


def test_windowed_replanning_recovers_drops(cfg, agent):
    _, gain = study_self_correction(agent, cfg)
    assert gain >= 20.0
