"""
Group Relative Policy Optimization for the planner.

Per iteration: freeze a snapshot, sample M responses per prompt from it,
score them with the action-aligned reward against the expert keypoints,
standardise rewards within each group, and take one Adam step on

    loss = -(1/M) * sum_i [ exp(logp(z_i) - logp_old(z_i)) * A_i - beta * KL_i ]

with KL_i the mean over tokens of rho - ln(rho) - 1, rho = p_ref / p.
"""
from __future__ import annotations

import datetime
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from latent_plan_vla.api.sources.demos.demos import (
    Demo, PlanningExample, demo_seed, generate_demos, planning_examples, qa_examples,
)
from latent_plan_vla.schemas.configs.config import DecodeConfig, RewardConfig, RunConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import PayloadKind
from latent_plan_vla.schemas.trajectories.trajectory import ParsedResponse, RewardBreakdown
from latent_plan_vla.workflows.components.planner.decoding import (
    batch_sequence_logprob, greedy_response, sample_group,
)
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.components.planner.parsing import parse_response
from latent_plan_vla.workflows.transforms.general.averages import add_smoothed_columns
from latent_plan_vla.workflows.transforms.geometry.traj_geom import dtw_distance
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tape, Tensor, backward
from latent_plan_vla.workflows.transforms.nn.optim import adam_step
from latent_plan_vla.workflows.transforms.rewards.rewards import total_reward

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['iter', 'mean_r_total', 'mean_r_goal', 'mean_r_traj', 'mean_r_format', 'mean_r_visual',
               'mean_kl', 'loss', 'wall_ms']
WORST_DTW = math.sqrt(2.0)


# -----------------------------------------------------------
# Group algebra
# -----------------------------------------------------------

def compute_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """
    A_i = (r_i - mean) / std with the population std; a group whose std is
    below eps gets all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise DomainError(f"advantages need a group of at least 2, got {r.size}")
    std = r.std(ddof=0)
    if std < eps:
        return np.zeros_like(r)
    return (r - r.mean()) / max(std, eps)


def kl_estimate(cur_logprobs, ref_logprobs) -> float:
    """mean over tokens of rho - ln(rho) - 1, rho = exp(ref - cur)"""
    cur = np.asarray(cur_logprobs, dtype=np.float64)
    ref = np.asarray(ref_logprobs, dtype=np.float64)
    if cur.shape != ref.shape:
        raise DomainError(f"logprob sequences differ in length: {cur.shape} vs {ref.shape}")
    if cur.size == 0:
        return 0.0
    d = ref - cur
    return float(np.mean(np.exp(d) - d - 1.0))


@dataclass
class RolloutGroup:
    """
    M responses to one prompt.
    - logprobs: per-token logprobs under the snapshot that sampled them
    - advantages come from this group's rewards only
    """
    prompt: np.ndarray
    tokens: List[np.ndarray]
    logprobs: List[np.ndarray]
    parsed: List[ParsedResponse] = field(default_factory=list)
    rewards: List[RewardBreakdown] = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    example: Optional[PlanningExample] = None
    temperature: float = 1.0

    def __len__(self):
        return len(self.tokens)

    @property
    def texts(self) -> List[str]:
        return [p.text for p in self.parsed]

    def r_total(self) -> np.ndarray:
        return np.array([r.r_total for r in self.rewards], dtype=np.float64)


def _objective_terms(group: RolloutGroup, model: PlannerModel, ref_model: PlannerModel, beta: float):
    m = len(group)
    if group.advantages is None or len(group.advantages) != m:
        raise DomainError("group advantages are missing")
    cur, mask = batch_sequence_logprob(model, group.prompt, group.tokens, group.temperature)
    ref, _ = batch_sequence_logprob(ref_model, group.prompt, group.tokens, group.temperature)
    old = np.zeros_like(mask)
    for i, lp in enumerate(group.logprobs):
        old[i, :len(lp)] = lp
    lengths = mask.sum(axis=1)

    seq = F.sum_(cur * mask, axis=1)
    ratio = F.exp(seq - (old * mask).sum(axis=1))
    diff = F.sub(ref.data, cur)
    kl_tok = F.exp(diff) - diff - 1.0
    kl = F.sum_(kl_tok * mask, axis=1) * (1.0 / lengths)
    per_rollout = ratio * group.advantages - kl * beta
    return F.sum_(per_rollout) * (-1.0 / m), float(kl.data.mean())


def grpo_objective(group: RolloutGroup, model: PlannerModel, ref_model: PlannerModel, beta: float) -> Tensor:
    """
    Scalar loss (negated objective) for one group. Gradients flow through the
    current model's logprobs only; old and reference logprobs are constants.
    """
    return _objective_terms(group, model, ref_model, beta)[0]


# -----------------------------------------------------------
# Rollouts
# -----------------------------------------------------------

def score_response(parsed: ParsedResponse, example: PlanningExample, reward: RewardConfig) -> RewardBreakdown:
    return total_reward(parsed, example.reference, reward, gold=example.gold)


def rollout_group(snapshot: PlannerModel, example: PlanningExample, m: int, decode: DecodeConfig,
                  reward: RewardConfig, seed, max_len: int) -> RolloutGroup:
    """Sample m responses from the frozen snapshot and score them."""
    rng = np.random.default_rng(seed)
    samples = sample_group(snapshot, example.prompt, decode, m, rng=rng, max_len=max_len)
    tokens = [s[0] for s in samples]
    # old logprobs come from the batched forward so the ratio matches the training pass numerically
    old, mask = batch_sequence_logprob(snapshot, example.prompt, tokens, decode.temperature)
    logprobs = [old.data[i, :len(t)].copy() for i, t in enumerate(tokens)]
    k = snapshot.cfg.num_keypoints
    parsed = [parse_response(t, snapshot.vocab, k) for t in tokens]
    rewards = [score_response(p, example, reward) for p in parsed]
    return RolloutGroup(prompt=example.prompt, tokens=tokens, logprobs=logprobs, parsed=parsed,
                        rewards=rewards, example=example, temperature=decode.temperature)


def _sample_batch(rng: np.random.Generator, prompts: Sequence[PlanningExample],
                  qa_prompts: Sequence[PlanningExample], batch_size: int, qa_fraction: float):
    n_qa = int(round(qa_fraction * batch_size)) if qa_prompts else 0
    batch = [prompts[int(i)] for i in rng.integers(len(prompts), size=batch_size - n_qa)]
    batch += [qa_prompts[int(i)] for i in rng.integers(len(qa_prompts), size=n_qa)]
    return batch


def train_rl(model: PlannerModel, prompts: Sequence[PlanningExample], cfg: RunConfig,
             qa_prompts: Sequence[PlanningExample] = (), reward: Optional[RewardConfig] = None,
             seed: Optional[int] = None) -> List[dict]:
    """
    GRPO loop. One snapshot and one Adam step per iteration; rollouts of a
    batch may fan out over `grpo.workers` threads and are reassembled in
    submission order.

    Returns:
        per-iteration log records (LOG_COLUMNS)
    """
    if not prompts:
        raise DomainError("train_rl needs at least one prompt")
    g = cfg.grpo
    reward = reward if reward is not None else cfg.reward
    seed = cfg.seed if seed is None else seed
    decode = cfg.decode.model_copy(update={'greedy': False})
    rng = np.random.default_rng([seed, 7])
    initial = model.snapshot() if g.kl_reference == 'initial' else None
    model.params.reset_moments()
    log = []
    pool = ThreadPoolExecutor(max_workers=g.workers) if g.workers > 1 else None
    bar = tqdm(range(g.iterations), desc='grpo', disable=not cfg.train.progress)
    try:
        for it in bar:
            t0 = time.perf_counter()
            old = model.snapshot()
            ref_model = old if initial is None else initial
            batch = _sample_batch(rng, prompts, qa_prompts, g.batch_size, g.qa_fraction)
            jobs = [(old, ex, g.group_size, decode, reward, [seed, it, j], g.max_len) for j, ex in enumerate(batch)]
            if pool is not None:
                groups = list(pool.map(lambda a: rollout_group(*a), jobs))
            else:
                groups = [rollout_group(*a) for a in jobs]
            for grp in groups:
                r = np.full(len(grp), 0.5) if g.constant_reward else grp.r_total()
                grp.advantages = compute_advantages(r, g.adv_eps)

            with Tape() as tape:
                terms = [_objective_terms(grp, model, ref_model, g.beta) for grp in groups]
                loss = F.sum_(F.concat([F.reshape(t[0], (1,)) for t in terms], axis=0)) * (1.0 / len(groups))
                backward(loss, store=model.params, tape=tape)
            mean_kl = float(np.mean([t[1] for t in terms]))
            adam_step(model.params, g.lr)

            rewards = [r for grp in groups for r in grp.rewards]
            rec = {
                'iter': it,
                'mean_r_total': float(np.mean([r.r_total for r in rewards])),
                'mean_r_goal': float(np.mean([r.r_goal for r in rewards])),
                'mean_r_traj': float(np.mean([r.r_traj for r in rewards])),
                'mean_r_format': float(np.mean([r.r_format for r in rewards])),
                'mean_r_visual': float(np.mean([r.r_visual for r in rewards])),
                'mean_kl': mean_kl,
                'loss': loss.item(),
                'wall_ms': (time.perf_counter() - t0) * 1e3,
            }
            log.append(rec)
            bar.set_description(f"grpo r {rec['mean_r_total']:.3f}")
    finally:
        if pool is not None:
            pool.shutdown()
    return log


# -----------------------------------------------------------
# Evaluation
# -----------------------------------------------------------

def evaluate_planner(model: PlannerModel, examples: Sequence[PlanningExample], reward: RewardConfig,
                     max_len: int) -> dict:
    """
    Greedy decode every prompt and average the reward components. Invalid
    trajectory payloads count at the worst normalised DTW, sqrt(2).
    """
    if not examples:
        raise DomainError("evaluate_planner needs at least one prompt")
    rows = []
    for ex in examples:
        parsed = parse_response(greedy_response(model, ex.prompt, max_len), model.vocab, model.cfg.num_keypoints)
        rb = score_response(parsed, ex, reward)
        dtw = WORST_DTW
        if parsed.payload_kind is PayloadKind.TRAJECTORY and ex.reference is not None:
            dtw = dtw_distance(parsed.trajectory, ex.reference)
        rows.append({**rb.to_record(), 'dtw': dtw, 'valid': float(parsed.valid)})
    df = pd.DataFrame(rows)
    return {f'mean_{c}': float(df[c].mean()) for c in df.columns}


class GrpoComponent:
    """
    RL stage: builds the prompt pool from demos (start frames, optional QA),
    a held-out evaluation set from fresh demos, then runs train_rl.
    """

    def __init__(self, cfg: RunConfig, demos: Sequence[Demo], model: PlannerModel,
                 reward: Optional[RewardConfig] = None):
        self.cfg = cfg
        self.demos = demos
        self.model = model
        self.reward = reward if reward is not None else cfg.reward
        self.db = self.extract()
        self.log: Optional[pd.DataFrame] = None
        self.evaluation: Optional[dict] = None

    def extract(self):
        print(f"    Building RL prompts {datetime.datetime.now()}")
        cfg = self.cfg
        k = cfg.model.num_keypoints
        vocab = self.model.vocab
        prompts = planning_examples(self.demos, vocab, cfg.sft.starts_per_demo, cfg.seed + 11, k,
                                    window_fraction=0.0, window_length=cfg.executor.window_length)
        qa = qa_examples(cfg.sim.qa_tasks, vocab, cfg.sft.qa_items, cfg.seed + 12) if cfg.grpo.qa_fraction > 0 else []
        n_eval = max(1, -(-cfg.grpo.eval_prompts // cfg.sft.starts_per_demo))
        eval_demos = generate_demos(cfg.sim.train_tasks, n_eval, demo_seed(cfg.seed, 7919), horizon=cfg.sim.horizon,
                                    max_retries=cfg.sim.max_retries)
        evals = planning_examples(eval_demos, vocab, cfg.sft.starts_per_demo, cfg.seed + 13, k)[:cfg.grpo.eval_prompts]
        return {'prompts': prompts, 'qa': qa, 'eval': evals}

    def evaluate(self) -> dict:
        return evaluate_planner(self.model, self.db['eval'], self.cfg.reward, self.cfg.grpo.max_len)

    def run_pipeline(self) -> pd.DataFrame:
        print(f"    Running GRPO {datetime.datetime.now()}")
        before = self.evaluate()
        logger.info("cold-start eval: r_visual %.3f, format %.3f", before['mean_r_visual'], before['mean_r_format'])
        log = train_rl(self.model, self.db['prompts'], self.cfg, qa_prompts=self.db['qa'], reward=self.reward)
        self.log = add_smoothed_columns(pd.DataFrame(log, columns=LOG_COLUMNS), ['mean_r_total', 'mean_r_visual'])
        self.evaluation = self.evaluate()
        logger.info("post-RL eval: r_visual %.3f, format %.3f", self.evaluation['mean_r_visual'],
                    self.evaluation['mean_r_format'])
        return self.log
