"""
Denoising-diffusion action-chunk policy.

The network predicts the noise added to a normalised action chunk
(dx / max_step, dy / max_step, grip) given the diffusion timestep, the
encoded state and the mean-pooled latent plan. Training uses the DDPM
forward process over a linear beta schedule; inference runs deterministic
DDIM over evenly spaced timesteps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from latent_plan_vla.api.sources.sim.tasks import TASK_LIBRARY
from latent_plan_vla.schemas.configs.config import DiffusionConfig
from latent_plan_vla.schemas.episodes.episode import Observation
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import ACTION_DIM, STATE_FEATURE_DIM
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tensor, as_tensor
from latent_plan_vla.workflows.transforms.nn.optim import ParamStore


@dataclass(frozen=True, eq=False)
class StateFeatures:
    """Encoded observation vector plus the task whose instruction is embedded."""
    features: np.ndarray
    task_id: int

    @classmethod
    def from_observation(cls, obs: Observation) -> 'StateFeatures':
        return cls(features=np.asarray(obs.features, dtype=np.float64), task_id=obs.task_id)


#####################################
# Noise schedule
#####################################

class NoiseSchedule:
    """
    Linear betas over `train_steps`; `infer_timesteps` are `infer_steps`
    evenly spaced training timesteps in descending order.
    """

    def __init__(self, train_steps: int, infer_steps: int, beta_start: float, beta_end: float):
        if train_steps < 2 or not 1 <= infer_steps <= train_steps:
            raise DomainError(f"bad schedule sizes: train={train_steps}, infer={infer_steps}")
        if not 0.0 < beta_start < beta_end < 1.0:
            raise DomainError(f"betas must satisfy 0 < {beta_start} < {beta_end} < 1")
        self.train_steps = train_steps
        self.infer_steps = infer_steps
        self.betas = np.linspace(beta_start, beta_end, train_steps)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = np.cumprod(self.alphas)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> 'NoiseSchedule':
        return cls(cfg.train_steps, cfg.infer_steps, cfg.beta_start, cfg.beta_end)

    def __repr__(self):
        return f"NoiseSchedule(train={self.train_steps}, infer={self.infer_steps})"

    def check_timesteps(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size == 0 or t.min() < 0 or t.max() >= self.train_steps:
            raise DomainError(f"timestep outside [0, {self.train_steps}): {t}")
        return t

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t, with t = -1 meaning the clean end of the chain (ᾱ = 1)."""
        if t < 0:
            return 1.0
        return float(self.alphas_cumprod[int(self.check_timesteps(t))])

    def infer_timesteps(self) -> np.ndarray:
        return np.round(np.linspace(self.train_steps - 1, 0, self.infer_steps)).astype(np.int64)

    def add_noise(self, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
        """x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) noise; t broadcasts over the leading axis."""
        ab = self.alphas_cumprod[self.check_timesteps(t)]
        ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x0) - np.ndim(ab)))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

    def predict_x0(self, x_t: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar(t)
        return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


#####################################
# Policy network
#####################################

class DiffusionPolicy:
    """
    Noise predictor. The state encoder (features + task embedding -> tanh)
    is part of this network and trains with it.
    """

    def __init__(self, cfg: DiffusionConfig, plan_dim: int, seed: int = 0, params: Optional[ParamStore] = None):
        self.cfg = cfg
        self.plan_dim = plan_dim
        self.horizon = cfg.chunk_horizon
        self.chunk_dim = cfg.chunk_horizon * ACTION_DIM
        self.schedule = NoiseSchedule.from_config(cfg)
        self.params = params if params is not None else self._init_params(seed)

    def __repr__(self):
        return f"DiffusionPolicy(H={self.horizon}, hidden={self.cfg.hidden}, plan_dim={self.plan_dim})"

    def _init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        cfg = self.cfg

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))

        n_in = self.chunk_dim + cfg.time_embed + cfg.state_embed + self.plan_dim
        store = ParamStore()
        store.add('task_emb', rng.normal(0.0, 1.0, (len(TASK_LIBRARY), cfg.task_embed)))
        store.add('w_state', dense(STATE_FEATURE_DIM + cfg.task_embed, cfg.state_embed))
        store.add('b_state', np.zeros(cfg.state_embed))
        store.add('w_in', dense(n_in, cfg.hidden))
        store.add('b_in', np.zeros(cfg.hidden))
        store.add('w_mid', dense(cfg.hidden, cfg.hidden))
        store.add('b_mid', np.zeros(cfg.hidden))
        store.add('w_out', dense(cfg.hidden, self.chunk_dim) * 0.1)
        store.add('b_out', np.zeros(self.chunk_dim))
        return store

    def checksum(self) -> str:
        return self.params.checksum()

    def snapshot(self) -> 'DiffusionPolicy':
        return DiffusionPolicy(self.cfg, self.plan_dim, params=self.params.snapshot())

    # ---------- forward ----------
    def encode_state(self, features, task_ids) -> Tensor:
        P = self.params
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != STATE_FEATURE_DIM:
            raise DomainError(f"state features have width {features.shape[1]}, expected {STATE_FEATURE_DIM}")
        task = F.embed(P['task_emb'], np.atleast_1d(np.asarray(task_ids, dtype=np.int64)))
        return F.tanh(F.linear(F.concat([as_tensor(features), task], axis=1), P['w_state'], P['b_state']))

    def predict_noise(self, x_t, t, features, task_ids, pooled_plan) -> Tensor:
        """
        Parameters
        ----------
        x_t : (B, H*3) noised normalised chunks
        t : (B,) timesteps
        features : (B, STATE_FEATURE_DIM)
        task_ids : (B,)
        pooled_plan : Tensor or array (B, plan_dim)

        Returns
        -------
        Tensor (B, H*3)
        """
        P = self.params
        t = self.schedule.check_timesteps(np.atleast_1d(t))
        x_t = as_tensor(np.atleast_2d(x_t) if not isinstance(x_t, Tensor) else x_t)
        pooled_plan = as_tensor(pooled_plan)
        if pooled_plan.ndim != 2 or pooled_plan.shape[1] != self.plan_dim:
            raise DomainError(f"pooled plan has shape {pooled_plan.shape}, expected (B, {self.plan_dim})")
        temb = timestep_embedding(t, self.cfg.time_embed)
        state = self.encode_state(features, task_ids)
        h = F.concat([x_t, as_tensor(temb), state, pooled_plan], axis=1)
        h = F.gelu(F.linear(h, P['w_in'], P['b_in']))
        h = h + F.gelu(F.linear(h, P['w_mid'], P['b_mid']))
        return F.linear(h, P['w_out'], P['b_out'])


#####################################
# Chunk normalisation
#####################################

def normalize_chunk(chunk: np.ndarray, max_step: float) -> np.ndarray:
    chunk = np.array(chunk, dtype=np.float64)
    chunk[..., :2] = chunk[..., :2] / max_step
    return chunk


def denormalize_chunk(chunk: np.ndarray, max_step: float) -> np.ndarray:
    chunk = np.clip(np.array(chunk, dtype=np.float64), -1.0, 1.0)
    chunk[..., :2] = chunk[..., :2] * max_step
    return chunk


def _pooled(plan, plan_dim: int) -> Tensor:
    plan = as_tensor(plan)
    if plan.ndim == 1:
        return F.reshape(plan, (1, plan.shape[0]))
    if plan.ndim == 2 and plan.shape[1] == plan_dim:
        return F.reshape(F.mean(plan, axis=0), (1, plan_dim))
    raise DomainError(f"latent plan has shape {plan.shape}, expected (Q, {plan_dim}) or ({plan_dim},)")


#####################################
# Objective and sampler
#####################################

def batch_ddpm_loss(policy: DiffusionPolicy, features, task_ids, pooled_plan, chunks, t, noise) -> Tensor:
    """Mean squared noise-prediction error over a batch of normalised chunks (B, H, 3)."""
    chunks = np.asarray(chunks, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if chunks.shape[1:] != (policy.horizon, ACTION_DIM) or noise.shape != chunks.shape:
        raise DomainError(f"chunk/noise shapes {chunks.shape} / {noise.shape} do not match H={policy.horizon}")
    t = policy.schedule.check_timesteps(np.atleast_1d(t))
    b = chunks.shape[0]
    x_t = policy.schedule.add_noise(chunks, t, noise).reshape(b, -1)
    eps = policy.predict_noise(x_t, t, features, task_ids, pooled_plan)
    return F.mse(eps, noise.reshape(b, -1))


def ddpm_loss(policy: DiffusionPolicy, state: StateFeatures, plan, chunk, t: int, noise) -> Tensor:
    """
    Noise-prediction loss for one action chunk.

    Args:
        state: encoded observation and task
        plan: latent plan (Q, d) or an already pooled (d,) vector
        chunk: (H, 3) actions in environment units
        t: diffusion timestep in [0, train_steps)
        noise: standard normal, same shape as chunk

    Returns:
        scalar Tensor
    """
    t = int(policy.schedule.check_timesteps(t))
    x0 = normalize_chunk(chunk, policy.cfg.max_step)[None]
    return batch_ddpm_loss(policy, state.features[None], [state.task_id], _pooled(plan, policy.plan_dim),
                           x0, [t], np.asarray(noise, dtype=np.float64)[None])


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from timestep t to t_prev (-1 = clean)."""
    ab_prev = schedule.alpha_bar(t_prev)
    x0 = schedule.predict_x0(x_t, t, eps)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


def ddim_sample(policy: DiffusionPolicy, state: StateFeatures, plan, schedule: Optional[NoiseSchedule] = None,
                seed: int = 0) -> np.ndarray:
    """
    Sample one action chunk, shape (H, 3) in environment units, clamped to the
    action bounds. Same seed, same chunk.
    """
    schedule = schedule if schedule is not None else policy.schedule
    rng = np.random.default_rng(seed)
    pooled = _pooled(plan, policy.plan_dim)
    features, task_ids = state.features[None], [state.task_id]
    x = rng.standard_normal((1, policy.chunk_dim))
    steps = schedule.infer_timesteps()
    for i, t in enumerate(steps):
        t_prev = int(steps[i + 1]) if i + 1 < len(steps) else -1
        eps = policy.predict_noise(x, [int(t)], features, task_ids, pooled).data
        x = ddim_step(x, eps, int(t), t_prev, schedule)
    return denormalize_chunk(x.reshape(policy.horizon, ACTION_DIM), policy.cfg.max_step)
