"""
Run configuration.

One TOML file holds every section below. Defaults are the full-size
hyperparameters (β=1e-2, top-p 0.99, 1000/20 diffusion steps, N=15, Q=32);
`configs/default.toml` carries the desk-scale values used for training runs.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import List, Literal, Optional

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from latent_plan_vla.schemas.general.errors import ConfigError
from latent_plan_vla.schemas.general.general import (
    BETA_END, BETA_START, CHUNK_HORIZON, COORD_BINS, DEFAULT_HORIZON,
    DIFFUSION_INFER_STEPS, DIFFUSION_TRAIN_STEPS, MAX_STEP, NUM_KEYPOINTS,
)

CONFIG_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class SimConfig(_Section):
    horizon: int = Field(DEFAULT_HORIZON, ge=1)
    max_retries: int = Field(100, ge=1)
    p_drop: float = Field(0.0, ge=0.0, le=1.0)
    train_tasks: List[str] = Field(default_factory=lambda: ['red-to-tray'])
    qa_tasks: List[str] = Field(default_factory=lambda: ['grasp-check'])
    few_shot_task: str = 'red-to-bin'


class ModelConfig(_Section):
    d_model: int = Field(64, ge=4)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    coord_bins: int = Field(COORD_BINS, ge=2)
    num_keypoints: int = Field(NUM_KEYPOINTS, ge=2)
    max_positions: int = Field(1152, ge=16)
    num_queries: int = Field(32, ge=1)
    init_std: float = Field(0.02, gt=0.0)

    @model_validator(mode='after')
    def _heads_divide(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self


class DecodeConfig(_Section):
    temperature: float = Field(1.0, gt=0.0)
    top_p: float = Field(0.99, gt=0.0, le=1.0)
    max_len: int = Field(1024, ge=8)
    seed: int = 0
    greedy: bool = False


class RewardConfig(_Section):
    w_goal: float = Field(0.5, ge=0.0)
    w_traj: float = Field(0.5, ge=0.0)
    w_visual: float = Field(0.9, ge=0.0)
    w_format: float = Field(0.1, ge=0.0)

    @model_validator(mode='after')
    def _weights_sum(self):
        # both zero is the "without goal and trajectory rewards" ablation
        pair = self.w_goal + self.w_traj
        if not (math.isclose(pair, 1.0, abs_tol=1e-12) or pair == 0.0):
            raise ValueError(f"w_goal + w_traj must be 1 (or both 0), got {pair}")
        if not math.isclose(self.w_visual + self.w_format, 1.0, abs_tol=1e-12):
            raise ValueError(f"w_visual + w_format must be 1, got {self.w_visual + self.w_format}")
        return self


class GrpoConfig(_Section):
    group_size: int = Field(5, ge=2)
    beta: float = Field(1e-2, ge=0.0)
    lr: float = Field(1e-6, gt=0.0)
    batch_size: int = Field(4, ge=1)
    iterations: int = Field(200, ge=0)
    adv_eps: float = Field(1e-8, gt=0.0)
    qa_fraction: float = Field(0.0, ge=0.0, le=1.0)
    kl_reference: Literal['snapshot', 'initial'] = 'snapshot'
    constant_reward: bool = False
    workers: int = Field(1, ge=1)
    eval_prompts: int = Field(32, ge=1)
    max_len: int = Field(96, ge=8)


class SftConfig(_Section):
    lr: float = Field(1e-5, gt=0.0)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(32, ge=1)
    demos: int = Field(200, ge=1)
    starts_per_demo: int = Field(3, ge=1)
    window_fraction: float = Field(0.5, ge=0.0, le=1.0)
    qa_items: int = Field(64, ge=0)
    held_out: int = Field(32, ge=0)
    drop_fraction: float = Field(0.3, ge=0.0, le=1.0)


class DiffusionConfig(_Section):
    train_steps: int = Field(DIFFUSION_TRAIN_STEPS, ge=2)
    infer_steps: int = Field(DIFFUSION_INFER_STEPS, ge=1)
    beta_start: float = Field(BETA_START, gt=0.0, lt=1.0)
    beta_end: float = Field(BETA_END, gt=0.0, lt=1.0)
    chunk_horizon: int = Field(CHUNK_HORIZON, ge=1)
    hidden: int = Field(128, ge=4)
    time_embed: int = Field(16, ge=2)
    state_embed: int = Field(64, ge=2)
    task_embed: int = Field(8, ge=1)
    max_step: float = Field(MAX_STEP, gt=0.0)

    @model_validator(mode='after')
    def _schedule(self):
        if not self.beta_start < self.beta_end:
            raise ValueError("beta_start must be below beta_end")
        if self.infer_steps > self.train_steps:
            raise ValueError("infer_steps cannot exceed train_steps")
        return self


class ImitationConfig(_Section):
    lr: float = Field(2e-5, gt=0.0)
    steps: int = Field(3000, ge=0)
    batch_size: int = Field(64, ge=1)
    demos: int = Field(200, ge=1)
    zero_plan: bool = False
    few_shot_demos: int = Field(10, ge=1)
    few_shot_steps: int = Field(500, ge=0)


class ExecutorConfig(_Section):
    actions_per_plan: int = Field(15, ge=1)
    self_correct: bool = False
    window: Optional[int] = Field(None, ge=1)
    horizon: int = Field(DEFAULT_HORIZON, ge=1)
    episodes: int = Field(100, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    p_drop: float = Field(0.0, ge=0.0, le=1.0)
    forced_drop_step: Optional[int] = Field(None, ge=0)
    workers: int = Field(1, ge=1)

    @property
    def window_length(self) -> int:
        return self.window if self.window is not None else self.actions_per_plan


class AblationConfig(_Section):
    reward_variants: List[Literal['full', 'no_traj', 'no_goal', 'no_both', 'sft_only']] = Field(
        default_factory=lambda: ['full', 'no_traj', 'no_goal', 'no_both', 'sft_only'])
    n_values: List[int] = Field(default_factory=lambda: [5, 10, 15, 30])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    episodes: int = Field(100, ge=1)
    p_drop: float = Field(0.3, ge=0.0, le=1.0)
    downstream: bool = True

    @field_validator('n_values')
    @classmethod
    def _positive(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("n_values must be a non-empty list of positive integers")
        return v


class PathsConfig(_Section):
    out_dir: str = 'runs/default'
    demos: str = 'demos.takt'
    planner_sft: str = 'planner_sft.takt'
    planner_rl: str = 'planner_rl.takt'
    plan_cache: str = 'plan_cache.takt'
    action: str = 'action.takt'

    def resolve(self, name: str) -> Path:
        return Path(self.out_dir) / getattr(self, name)


class TrainConfig(_Section):
    progress: bool = True
    log_level: str = 'INFO'


class RunConfig(_Section):
    config_version: int = CONFIG_VERSION
    seed: int = 0
    sim: SimConfig = Field(default_factory=SimConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    sft: SftConfig = Field(default_factory=SftConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    imitation: ImitationConfig = Field(default_factory=ImitationConfig)
    executor: ExecutorConfig = Field(default_factory=ExecutorConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator('config_version')
    @classmethod
    def _known_version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config_version {v} (expected {CONFIG_VERSION})")
        return v


def load_config(path) -> RunConfig:
    """
    Read and validate a TOML run configuration.

    Raises:
        ConfigError: missing file, TOML syntax error or schema violation.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = toml.load(path)
    except (toml.TomlDecodeError, OSError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e


def dump_config(cfg: RunConfig, path=None) -> str:
    """Serialise cfg as TOML; None-valued fields are omitted so the file stays loadable."""
    text = toml.dumps(cfg.model_dump(mode='json', exclude_none=True))
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text
