import numpy as np
import pytest

from latent_plan_vla.api.sources.sim.manipulation import observe
from latent_plan_vla.schemas.configs.config import (
    DiffusionConfig, ExecutorConfig, GrpoConfig, ImitationConfig, ModelConfig, RunConfig, SftConfig,
)
from latent_plan_vla.schemas.episodes.episode import ObjectState, SimState
from latent_plan_vla.schemas.trajectories.trajectory import Point2D
from latent_plan_vla.workflows.components.planner.model import PlannerModel, encode_prompt
from latent_plan_vla.workflows.components.planner.vocab import TokenVocab
from latent_plan_vla.workflows.transforms.nn.core import Tape


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f with respect to every entry of x (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        hi = f()
        x[i] = old - h
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def sampled_numeric_grad(f, x: np.ndarray, count: int, seed: int = 0, h: float = 1e-6):
    """Central differences at `count` random entries of x. Returns (flat indices, gradient values)."""
    idx = np.random.default_rng(seed).choice(x.size, size=min(count, x.size), replace=False)
    flat = x.reshape(-1)
    g = np.zeros(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        hi = f()
        flat[i] = old - h
        lo = f()
        flat[i] = old
        g[n] = (hi - lo) / (2 * h)
    return idx, g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(1e-12, np.linalg.norm(a) + np.linalg.norm(b)))


def analytic_grad(build, param):
    """Gradient of build() (a scalar Tensor) with respect to param, via the tape."""
    param.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return param.grad


@pytest.fixture
def small_cfg() -> RunConfig:
    return RunConfig(
        seed=0,
        model=ModelConfig(d_model=16, n_layers=1, n_heads=2, max_positions=256, num_queries=4),
        sft=SftConfig(lr=3e-3, steps=20, batch_size=4, demos=4),
        grpo=GrpoConfig(lr=1e-3, iterations=2, batch_size=2, group_size=3, max_len=80),
        diffusion=DiffusionConfig(train_steps=50, infer_steps=5, hidden=32),
        imitation=ImitationConfig(lr=1e-3, steps=5, batch_size=8, demos=2),
        executor=ExecutorConfig(actions_per_plan=15, episodes=2, seeds=[0], horizon=40),
    )


@pytest.fixture
def vocab():
    return TokenVocab()


@pytest.fixture
def planner(small_cfg, vocab):
    return PlannerModel(small_cfg.model, vocab, seed=0)


@pytest.fixture
def red_state():
    return SimState(gripper=Point2D(0.5, 0.5), grip_closed=False,
                    objects=(ObjectState(position=Point2D(0.2, 0.3)),), goal=Point2D(0.6, 0.8))


@pytest.fixture
def prompt(red_state, vocab):
    return encode_prompt(observe(red_state, 0), 'move the red block to the tray', vocab)
