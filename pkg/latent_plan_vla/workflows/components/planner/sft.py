from __future__ import annotations

import datetime
import logging
import time
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from latent_plan_vla.api.sources.demos.demos import Demo, PlanningExample, sft_corpus
from latent_plan_vla.schemas.configs.config import RunConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.workflows.components.planner.decoding import greedy_response
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.components.planner.parsing import parse_response
from latent_plan_vla.workflows.components.planner.vocab import TokenVocab
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tape, backward
from latent_plan_vla.workflows.transforms.nn.optim import adam_step

logger = logging.getLogger(__name__)


def teacher_forcing_batch(examples: Sequence[PlanningExample], pad_id: int):
    """
    Right-padded (inputs, targets, mask); mask is 1 where the target is a response token.
    """
    seqs = [np.concatenate([ex.prompt, ex.response]) for ex in examples]
    t = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), t), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), t), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=np.float64)
    for i, (ex, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, len(ex.prompt) - 1:n] = 1.0
    return inputs, targets, mask


def cross_entropy(model: PlannerModel, examples: Sequence[PlanningExample]):
    """Mean negative log-likelihood per response token (a Tensor)."""
    inputs, targets, mask = teacher_forcing_batch(examples, model.vocab.pad_id)
    logits, _ = model.forward(inputs)
    nll = F.pick(F.log_softmax(logits, axis=-1), targets) * mask
    return F.sum_(nll) * (-1.0 / mask.sum())


def sft_cold_start(model: PlannerModel, examples: Sequence[PlanningExample], lr: float = 1e-5, steps: int = 2000,
                   batch_size: int = 32, seed: int = 0, progress: bool = True) -> List[dict]:
    """
    Teacher-forced cross-entropy on expert responses, one Adam step per batch.

    Returns:
        one log record per step: {step, loss, wall_ms}
    """
    if len(examples) == 0:
        raise DomainError("sft_cold_start needs at least one example")
    rng = np.random.default_rng(seed)
    size = min(batch_size, len(examples))
    log = []
    bar = tqdm(range(steps), desc='sft', disable=not progress)
    for it in bar:
        t0 = time.perf_counter()
        idx = np.sort(rng.choice(len(examples), size=size, replace=False))
        with Tape() as tape:
            loss = cross_entropy(model, [examples[i] for i in idx])
            backward(loss, store=model.params, tape=tape)
        adam_step(model.params, lr)
        log.append({'step': it, 'loss': loss.item(), 'wall_ms': (time.perf_counter() - t0) * 1e3})
        bar.set_description(f"sft loss {loss.item():.3f}")
    return log


def format_rate(model: PlannerModel, examples: Sequence[PlanningExample], max_len: int) -> float:
    """Fraction of prompts whose greedy response passes the format grammar."""
    if not examples:
        return 0.0
    ok = 0
    for ex in examples:
        tokens = greedy_response(model, ex.prompt, max_len)
        ok += parse_response(tokens, model.vocab, model.cfg.num_keypoints).format_ok
    return ok / len(examples)


class PlannerSftComponent:
    """
    Cold-starts the planner on expert responses rendered from demos, plus drop
    recoveries and QA items. A held-out slice of the corpus measures the greedy
    format rate afterwards.
    """

    def __init__(self, cfg: RunConfig, demos: Sequence[Demo], model: Optional[PlannerModel] = None,
                 vocab: Optional[TokenVocab] = None):
        self.cfg = cfg
        self.demos = demos
        self.vocab = vocab if vocab is not None else TokenVocab(cfg.model.coord_bins)
        self.model = model if model is not None else PlannerModel(cfg.model, self.vocab, seed=cfg.seed)
        self.db = self.extract()
        self.log: Optional[pd.DataFrame] = None
        self.held_out_format_rate: Optional[float] = None

    def extract(self):
        print(f"    Building SFT corpus {datetime.datetime.now()}")
        corpus = sft_corpus(
            self.demos, self.vocab, self.cfg.sft, self.cfg.sim.qa_tasks, seed=self.cfg.seed,
            k=self.cfg.model.num_keypoints, window_length=self.cfg.executor.window_length,
            horizon=self.cfg.sim.horizon,
        )
        rng = np.random.default_rng(self.cfg.seed)
        order = rng.permutation(len(corpus))
        n_held = min(self.cfg.sft.held_out, max(0, len(corpus) - 1))
        return {
            'train': [corpus[i] for i in order[n_held:]],
            'held_out': [corpus[i] for i in order[:n_held]],
        }

    def run_pipeline(self) -> pd.DataFrame:
        print(f"    Training planner cold start {datetime.datetime.now()}")
        log = sft_cold_start(
            self.model, self.db['train'], lr=self.cfg.sft.lr, steps=self.cfg.sft.steps,
            batch_size=self.cfg.sft.batch_size, seed=self.cfg.seed, progress=self.cfg.train.progress,
        )
        self.log = pd.DataFrame(log, columns=['step', 'loss', 'wall_ms'])
        if self.db['held_out']:
            self.held_out_format_rate = format_rate(self.model, self.db['held_out'], self.cfg.grpo.max_len)
            logger.info("held-out greedy format rate %.3f", self.held_out_format_rate)
        return self.log
