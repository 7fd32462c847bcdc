from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from latent_plan_vla.schemas.configs.config import DecodeConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tensor


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """
    Keep the smallest descending-probability prefix whose mass reaches top_p,
    renormalise, zero the rest. Ties keep the lower token id first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind='stable')
    cum = np.cumsum(probs[order])
    keep = min(int(np.searchsorted(cum, top_p * cum[-1], side='left')) + 1, probs.size)
    out = np.zeros_like(probs)
    kept = order[:keep]
    out[kept] = probs[kept] / probs[kept].sum()
    return out


def sample_group(model: PlannerModel, prompt, cfg: DecodeConfig, m: int,
                 rng: Optional[np.random.Generator] = None,
                 max_len: Optional[int] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Decode m responses to one prompt in lockstep.

    Each sequence stops at its first EOS (kept, with its logprob) or at max_len.
    Stored logprobs are log_softmax(logits / temperature) of the sampled token,
    i.e. under the sampling model before nucleus truncation.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise DomainError("sample_response needs a non-empty prompt")
    max_len = cfg.max_len if max_len is None else max_len
    max_len = min(max_len, model.cfg.max_positions - prompt.size)
    if max_len < 1:
        raise DomainError(f"prompt of {prompt.size} tokens leaves no room to decode")
    greedy = cfg.greedy
    if rng is None and not greedy:
        rng = np.random.default_rng(cfg.seed)
    eos = model.vocab.eos_id
    pad = model.vocab.pad_id

    seqs = np.tile(prompt, (m, 1))
    tokens = np.full((m, max_len), pad, dtype=np.int64)
    logprobs = np.zeros((m, max_len), dtype=np.float64)
    lengths = np.zeros(m, dtype=np.int64)
    alive = np.ones(m, dtype=bool)
    for pos in range(max_len):
        logits = model.next_token_logits(seqs)
        logp = _log_softmax_np(logits / cfg.temperature)
        nxt = np.full(m, pad, dtype=np.int64)
        for i in range(m):
            if not alive[i]:
                continue
            if greedy:
                tok = int(np.argmax(logp[i]))
            else:
                probs = nucleus_filter(np.exp(logp[i]), cfg.top_p)
                cum = np.cumsum(probs)
                tok = int(np.searchsorted(cum, rng.random() * cum[-1], side='right'))
                tok = min(tok, probs.size - 1)
            nxt[i] = tok
            tokens[i, pos] = tok
            logprobs[i, pos] = logp[i, tok]
            lengths[i] = pos + 1
            if tok == eos:
                alive[i] = False
        if not alive.any():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return [(tokens[i, :lengths[i]].copy(), logprobs[i, :lengths[i]].copy()) for i in range(m)]


def sample_response(model: PlannerModel, prompt, cfg: DecodeConfig,
                    rng: Optional[np.random.Generator] = None,
                    max_len: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(tokens, per-token logprobs) for one nucleus-sampled (or greedy) response."""
    return sample_group(model, prompt, cfg, 1, rng=rng, max_len=max_len)[0]


def greedy_response(model: PlannerModel, prompt, max_len: int) -> np.ndarray:
    cfg = DecodeConfig(greedy=True, max_len=max(8, max_len))
    return sample_group(model, prompt, cfg, 1, max_len=max_len)[0][0]


def batch_sequence_logprob(model: PlannerModel, prompt, responses: Sequence[np.ndarray],
                           temperature: float = 1.0) -> Tuple[Tensor, np.ndarray]:
    """
    Teacher-forced per-token logprobs for several responses to one prompt.

    Returns
    -------
    (logprobs Tensor [M, L], mask [M, L]) with L the longest response; padded
    positions carry mask 0.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    m = len(responses)
    if m == 0:
        raise DomainError("no responses to score")
    lens = [len(r) for r in responses]
    if min(lens) == 0:
        raise DomainError("cannot score an empty response")
    L = max(lens)
    resp = np.full((m, L), model.vocab.pad_id, dtype=np.int64)
    mask = np.zeros((m, L), dtype=np.float64)
    for i, r in enumerate(responses):
        r = np.asarray(r, dtype=np.int64)
        if r.min() < 0 or r.max() >= model.vocab.size:
            raise DomainError(f"token id outside [0, {model.vocab.size})")
        resp[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    inputs = np.concatenate([np.tile(prompt, (m, 1)), resp[:, :-1]], axis=1)
    logits, _ = model.forward(inputs)
    start = prompt.size - 1
    logits = logits[:, start:start + L]
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return F.pick(F.log_softmax(logits, axis=-1), resp), mask


def sequence_logprob(model: PlannerModel, prompt, tokens, temperature: float = 1.0) -> Tensor:
    """Per-token teacher-forced logprobs of `tokens` after `prompt`, shape [len(tokens)]."""
    lp, _ = batch_sequence_logprob(model, prompt, [np.asarray(tokens, dtype=np.int64)], temperature)
    return lp[0]
