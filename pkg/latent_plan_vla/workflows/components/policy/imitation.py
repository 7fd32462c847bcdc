"""
Action-policy imitation on expert demos.

The planner is frozen: its greedy responses are decoded once per plan
boundary (t = 0 mod N) of every demo and the response hidden states cached.
Training then updates the diffusion policy (with its state encoder) and the
latent projector on (state, cached plan, expert chunk) triples.
"""
from __future__ import annotations

import datetime
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from latent_plan_vla.api.sources.demos.demos import Demo
from latent_plan_vla.api.sources.sim.manipulation import observe, state_features
from latent_plan_vla.api.sources.sim.tasks import TASKS_BY_ID
from latent_plan_vla.schemas.configs.config import RunConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import ACTION_DIM, MAX_STEP
from latent_plan_vla.workflows.components.planner.decoding import greedy_response
from latent_plan_vla.workflows.components.planner.model import PlannerModel, encode_prompt
from latent_plan_vla.workflows.components.planner.projector import LatentProjector, pool_plan
from latent_plan_vla.workflows.components.policy.diffusion import DiffusionPolicy, batch_ddpm_loss, normalize_chunk
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tape, backward
from latent_plan_vla.workflows.transforms.nn.optim import adam_step

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['step', 'loss', 'wall_ms']


@dataclass
class PlanCache:
    """
    Response hidden states of the frozen planner, one entry per plan boundary.
    - episode / step / seed identify the demo frame each entry was decoded at
    - checksum is the planner's parameter checksum when the cache was built
    """
    checksum: str
    actions_per_plan: int
    episode: np.ndarray
    step: np.ndarray
    seed: np.ndarray
    hidden: List[np.ndarray]

    def __len__(self):
        return len(self.hidden)

    def __repr__(self):
        return f"PlanCache(entries={len(self)}, N={self.actions_per_plan}, planner={self.checksum[:12]})"

    def index(self):
        return {(int(e), int(t)): i for i, (e, t) in enumerate(zip(self.episode, self.step))}


@dataclass
class ImitationDataset:
    """One row per demo step; chunks are normalised (dx, dy by max_step)."""
    features: np.ndarray
    task_ids: np.ndarray
    chunks: np.ndarray
    plan_index: np.ndarray

    def __len__(self):
        return len(self.features)


def _demo_states(demo: Demo):
    episode, _ = demo
    return [episode.initial_state] + [r.state for r in episode.records]


def build_plan_cache(planner: PlannerModel, demos: Sequence[Demo], actions_per_plan: int, max_len: int,
                     progress: bool = True) -> PlanCache:
    """Greedy-decode the planner at every plan boundary of every demo and keep the response hidden states."""
    if actions_per_plan < 1:
        raise DomainError(f"actions_per_plan must be >= 1, got {actions_per_plan}")
    print(f"    Caching latent plans {datetime.datetime.now()}")
    vocab = planner.vocab
    episodes, steps, seeds, hidden = [], [], [], []
    for e, demo in enumerate(tqdm(demos, desc='plan cache', disable=not progress)):
        episode, _ = demo
        task = TASKS_BY_ID[episode.task_id]
        states = _demo_states(demo)
        for t in range(0, len(episode), actions_per_plan):
            prompt = encode_prompt(observe(states[t], task.task_id, vocab.coord_bins), task.instruction, vocab)
            response = greedy_response(planner, prompt, max_len)
            hidden.append(planner.response_hidden(prompt, response).data.copy())
            episodes.append(e)
            steps.append(t)
            seeds.append(episode.seed)
    logger.info("cached %d plans over %d demos", len(hidden), len(demos))
    return PlanCache(checksum=planner.checksum(), actions_per_plan=actions_per_plan,
                     episode=np.asarray(episodes, dtype=np.int64), step=np.asarray(steps, dtype=np.int64),
                     seed=np.asarray(seeds, dtype=np.int64), hidden=hidden)


def expert_chunk(actions: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """
    actions[t:t+horizon]; past the episode end the chunk holds still with the
    last grip command.
    """
    chunk = np.zeros((horizon, ACTION_DIM))
    tail = actions[t:t + horizon]
    chunk[:len(tail)] = tail
    if len(tail) < horizon:
        chunk[len(tail):, 2] = actions[-1, 2]
    return chunk


def build_dataset(demos: Sequence[Demo], cache: PlanCache, horizon: int, max_step: float = MAX_STEP) -> ImitationDataset:
    """
    Raises:
        DomainError: the cache does not hold exactly the plan boundaries of these demos.
    """
    n = cache.actions_per_plan
    lookup = cache.index()
    expected = sum(-(-len(ep) // n) for ep, _ in demos)
    if expected != len(cache):
        raise DomainError(f"demo/plan cache mismatch: {expected} plan boundaries, cache holds {len(cache)}")
    features, task_ids, chunks, plan_index = [], [], [], []
    for e, demo in enumerate(demos):
        episode, _ = demo
        states = _demo_states(demo)
        actions = np.stack([r.action.as_array() for r in episode.records])
        for t in range(len(episode)):
            key = (e, (t // n) * n)
            i = lookup.get(key)
            if i is None or int(cache.seed[i]) != episode.seed:
                raise DomainError(f"demo/plan cache mismatch at episode {e}, step {key[1]}")
            features.append(state_features(states[t]))
            task_ids.append(episode.task_id)
            chunks.append(normalize_chunk(expert_chunk(actions, t, horizon), max_step))
            plan_index.append(i)
    return ImitationDataset(features=np.stack(features), task_ids=np.asarray(task_ids, dtype=np.int64),
                            chunks=np.stack(chunks), plan_index=np.asarray(plan_index, dtype=np.int64))


def imitation_train(policy: DiffusionPolicy, projector: LatentProjector, cache: PlanCache, dataset: ImitationDataset,
                    lr: float = 2e-5, steps: int = 3000, batch_size: int = 64, seed: int = 0, zero_plan: bool = False,
                    planner: Optional[PlannerModel] = None, progress: bool = True) -> List[dict]:
    """
    Minimise the DDPM loss over (state, plan, chunk) triples. With zero_plan
    the policy sees an all-zero plan and the projector is left untouched.

    Returns:
        one log record per step: {step, loss, wall_ms}
    """
    if len(dataset) == 0:
        raise DomainError("imitation_train needs a non-empty dataset")
    if planner is not None and planner.checksum() != cache.checksum:
        raise DomainError("plan cache was built by a different planner")
    frozen = planner.checksum() if planner is not None else None
    rng = np.random.default_rng([seed, 17])
    size = min(batch_size, len(dataset))
    d = policy.plan_dim
    T = policy.schedule.train_steps
    policy.params.reset_moments()
    projector.params.reset_moments()
    log = []
    bar = tqdm(range(steps), desc='imitation', disable=not progress)
    for it in bar:
        t0 = time.perf_counter()
        idx = np.sort(rng.choice(len(dataset), size=size, replace=False))
        t = rng.integers(0, T, size=size)
        noise = rng.standard_normal((size, policy.horizon, ACTION_DIM))
        with Tape() as tape:
            if zero_plan:
                pooled = np.zeros((size, d))
            else:
                uniq, inv = np.unique(dataset.plan_index[idx], return_inverse=True)
                table = F.concat([F.reshape(pool_plan(projector(cache.hidden[u])), (1, d)) for u in uniq], axis=0)
                pooled = F.embed(table, inv)
            loss = batch_ddpm_loss(policy, dataset.features[idx], dataset.task_ids[idx], pooled,
                                   dataset.chunks[idx], t, noise)
            backward(loss, store=policy.params, tape=tape)
        adam_step(policy.params, lr)
        if zero_plan:
            projector.params.zero_grad()
        else:
            projector.params.fill_missing_grads()
            adam_step(projector.params, lr)
        log.append({'step': it, 'loss': loss.item(), 'wall_ms': (time.perf_counter() - t0) * 1e3})
        bar.set_description(f"imitation loss {loss.item():.4f}")
    if frozen is not None:
        if planner.checksum() != frozen:
            raise DomainError("planner parameters changed during imitation")
    return log


class ActionComponent:
    """
    Action stage: caches plans from the frozen planner (unless a cache is
    handed in), builds the imitation dataset and trains policy + projector.
    """

    def __init__(self, cfg: RunConfig, demos: Sequence[Demo], planner: PlannerModel,
                 policy: Optional[DiffusionPolicy] = None, projector: Optional[LatentProjector] = None,
                 cache: Optional[PlanCache] = None, zero_plan: Optional[bool] = None):
        self.cfg = cfg
        self.demos = demos
        self.planner = planner
        self.policy = policy if policy is not None else DiffusionPolicy(cfg.diffusion, cfg.model.d_model, seed=cfg.seed)
        self.projector = projector if projector is not None else LatentProjector(cfg.model, seed=cfg.seed + 1)
        self.zero_plan = cfg.imitation.zero_plan if zero_plan is None else zero_plan
        self.cache = cache
        self.db = self.extract()
        self.log: Optional[pd.DataFrame] = None

    def extract(self):
        if self.cache is None:
            self.cache = build_plan_cache(self.planner, self.demos, self.cfg.executor.actions_per_plan,
                                          self.cfg.grpo.max_len, progress=self.cfg.train.progress)
        print(f"    Building imitation dataset {datetime.datetime.now()}")
        return build_dataset(self.demos, self.cache, self.cfg.diffusion.chunk_horizon, self.cfg.diffusion.max_step)

    def run_pipeline(self, steps: Optional[int] = None) -> pd.DataFrame:
        print(f"    Training action policy {datetime.datetime.now()}")
        im = self.cfg.imitation
        log = imitation_train(
            self.policy, self.projector, self.cache, self.db, lr=im.lr,
            steps=im.steps if steps is None else steps, batch_size=im.batch_size, seed=self.cfg.seed,
            zero_plan=self.zero_plan, planner=self.planner, progress=self.cfg.train.progress,
        )
        self.log = pd.DataFrame(log, columns=LOG_COLUMNS)
        logger.info("imitation done: final loss %.4f", self.log['loss'].iloc[-1] if len(self.log) else float('nan'))
        return self.log
