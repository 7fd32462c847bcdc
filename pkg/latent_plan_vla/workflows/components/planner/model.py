"""
Decoder-only planner: token + position embeddings, pre-LN transformer blocks
with causal multi-head attention and a GELU MLP, final LayerNorm, untied output
projection. All weights live in one ParamStore.
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from latent_plan_vla.api.sources.sim.tasks import TASKS_BY_ID, task_for_instruction
from latent_plan_vla.schemas.configs.config import ModelConfig
from latent_plan_vla.schemas.episodes.episode import Observation
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.workflows.components.planner.vocab import BOS, SEP, WIN, TokenVocab, task_token
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tensor
from latent_plan_vla.workflows.transforms.nn.optim import ParamStore

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


# -----------------------------------------------------------
# Prompt encoding
# -----------------------------------------------------------

def _caption_ids(vocab: TokenVocab, obs: Observation):
    return vocab.ids(obs.caption)


def encode_prompt(obs: Observation, instruction: str, vocab: TokenVocab) -> np.ndarray:
    """
    [BOS, task, caption..., SEP]. The caption carries quantised gripper, block
    and goal coordinates plus grip and held markers.
    """
    task = task_for_instruction(instruction)
    ids = [vocab.bos_id, vocab.id(task_token(task.name))] + _caption_ids(vocab, obs) + [vocab.sep_id]
    return vocab.as_array(ids)


def encode_window_prompt(window: Sequence[Observation], instruction: str, vocab: TokenVocab) -> np.ndarray:
    """
    [BOS, task, WIN, oldest caption, mid caption, current caption, SEP] for the
    self-correcting planner.
    """
    if len(window) != 3:
        raise DomainError(f"window prompt needs (oldest, mid, current), got {len(window)} observations")
    task = task_for_instruction(instruction)
    ids = [vocab.bos_id, vocab.id(task_token(task.name)), vocab.win_id]
    for obs in window:
        ids += _caption_ids(vocab, obs)
    ids.append(vocab.sep_id)
    return vocab.as_array(ids)


def instruction_for(task_id: int) -> str:
    return TASKS_BY_ID[task_id].instruction


# -----------------------------------------------------------
# Model
# -----------------------------------------------------------

class PlannerModel:
    """
    - logits shape [batch, sequence, vocab]
    - `params` is the trainable store; snapshot() returns a frozen copy for sampling
    """

    def __init__(self, cfg: ModelConfig, vocab: TokenVocab, seed: int = 0, params: Optional[ParamStore] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.params = params if params is not None else self._init_params(seed)

    def __repr__(self):
        return f"PlannerModel(d={self.d}, layers={self.cfg.n_layers}, heads={self.n_heads}, vocab={self.vocab.size})"

    def _init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        cfg, d, v = self.cfg, self.cfg.d_model, self.vocab.size
        std = cfg.init_std
        hidden = cfg.mlp_ratio * d
        store = ParamStore()
        store.add('tok_emb', rng.normal(0.0, std, (v, d)))
        store.add('pos_emb', rng.normal(0.0, std, (cfg.max_positions, d)))
        proj_std = std / math.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            p = f'block{i}.'
            store.add(p + 'ln1_g', np.ones(d))
            store.add(p + 'ln1_b', np.zeros(d))
            store.add(p + 'w_qkv', rng.normal(0.0, std, (d, 3 * d)))
            store.add(p + 'b_qkv', np.zeros(3 * d))
            store.add(p + 'w_o', rng.normal(0.0, proj_std, (d, d)))
            store.add(p + 'b_o', np.zeros(d))
            store.add(p + 'ln2_g', np.ones(d))
            store.add(p + 'ln2_b', np.zeros(d))
            store.add(p + 'w_fc', rng.normal(0.0, std, (d, hidden)))
            store.add(p + 'b_fc', np.zeros(hidden))
            store.add(p + 'w_proj', rng.normal(0.0, proj_std, (hidden, d)))
            store.add(p + 'b_proj', np.zeros(d))
        store.add('lnf_g', np.ones(d))
        store.add('lnf_b', np.zeros(d))
        store.add('w_out', rng.normal(0.0, std, (d, v)))
        return store

    def snapshot(self) -> 'PlannerModel':
        return PlannerModel(self.cfg, self.vocab, params=self.params.snapshot())

    def checksum(self) -> str:
        return self.params.checksum()

    # ---------- forward ----------
    def _attention(self, x: Tensor, p: str, mask: np.ndarray) -> Tensor:
        P = self.params
        b, t, d = x.shape
        h, hd = self.n_heads, self.head_dim
        qkv = F.linear(x, P[p + 'w_qkv'], P[p + 'b_qkv'])
        qkv = F.reshape(qkv, (b, t, 3, h, hd))
        q = F.transpose(qkv[:, :, 0], (0, 2, 1, 3))
        k = F.transpose(qkv[:, :, 1], (0, 2, 3, 1))
        v = F.transpose(qkv[:, :, 2], (0, 2, 1, 3))
        scores = F.matmul(q, k) * (1.0 / math.sqrt(hd)) + mask
        att = F.softmax(scores, axis=-1)
        y = F.matmul(att, v)
        y = F.reshape(F.transpose(y, (0, 2, 1, 3)), (b, t, d))
        return F.linear(y, P[p + 'w_o'], P[p + 'b_o'])

    def _mlp(self, x: Tensor, p: str) -> Tensor:
        P = self.params
        return F.linear(F.gelu(F.linear(x, P[p + 'w_fc'], P[p + 'b_fc'])), P[p + 'w_proj'], P[p + 'b_proj'])

    def forward(self, ids) -> Tuple[Tensor, Tensor]:
        """
        Parameters
        ----------
        ids : int array, shape (T,) or (B, T)

        Returns
        -------
        (logits [B, T, V], final-layer hidden states [B, T, d])
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, t = ids.shape
        if t == 0:
            raise DomainError("forward needs at least one token")
        if t > self.cfg.max_positions:
            raise DomainError(f"sequence of {t} tokens exceeds max_positions={self.cfg.max_positions}")
        if ids.min() < 0 or ids.max() >= self.vocab.size:
            raise DomainError(f"token id outside [0, {self.vocab.size})")
        P = self.params
        mask = np.triu(np.full((t, t), MASK_VALUE), k=1)
        x = F.embed(P['tok_emb'], ids) + F.embed(P['pos_emb'], np.arange(t))
        for i in range(self.cfg.n_layers):
            p = f'block{i}.'
            x = x + self._attention(F.layernorm(x, P[p + 'ln1_g'], P[p + 'ln1_b']), p, mask)
            x = x + self._mlp(F.layernorm(x, P[p + 'ln2_g'], P[p + 'ln2_b']), p)
        hidden = F.layernorm(x, P['lnf_g'], P['lnf_b'])
        logits = F.matmul(hidden, P['w_out'])
        return logits, hidden

    def next_token_logits(self, ids) -> np.ndarray:
        logits, _ = self.forward(ids)
        return logits.data[:, -1, :]

    def response_hidden(self, prompt, response) -> Tensor:
        """
        Final-layer hidden states at the response positions, truncated after
        the first EOS so trailing padding never reaches them.
        """
        response = np.asarray(response, dtype=np.int64)
        eos = np.flatnonzero(response == self.vocab.eos_id)
        if eos.size:
            response = response[:eos[0] + 1]
        if response.size == 0:
            raise DomainError("empty response has no hidden states")
        prompt = np.asarray(prompt, dtype=np.int64)
        ids = np.concatenate([prompt, response])
        _, hidden = self.forward(ids)
        return hidden[0, len(prompt):]
