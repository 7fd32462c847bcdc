from __future__ import annotations

import math
from typing import Optional

import numpy as np

from latent_plan_vla.schemas.configs.config import ModelConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tensor, as_tensor
from latent_plan_vla.workflows.transforms.nn.optim import ParamStore


class LatentProjector:
    """
    Cross-attention pooling of response hidden states into a fixed Q x d plan.
    Q learned queries attend over the response; output shape never depends on
    response length.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: Optional[ParamStore] = None):
        self.num_queries = cfg.num_queries
        self.d = cfg.d_model
        self.params = params if params is not None else self._init_params(cfg, seed)

    def __repr__(self):
        return f"LatentProjector(queries={self.num_queries}, d={self.d})"

    def _init_params(self, cfg: ModelConfig, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        d, q = cfg.d_model, cfg.num_queries
        scale = 1.0 / math.sqrt(d)
        store = ParamStore()
        store.add('queries', rng.normal(0.0, 1.0, (q, d)))
        store.add('w_q', rng.normal(0.0, scale, (d, d)))
        store.add('w_k', rng.normal(0.0, scale, (d, d)))
        store.add('w_v', rng.normal(0.0, scale, (d, d)))
        store.add('w_o', rng.normal(0.0, scale, (d, d)))
        store.add('ln_g', np.ones(d))
        store.add('ln_b', np.zeros(d))
        return store

    def __call__(self, hidden) -> Tensor:
        return project_latent(self, hidden)


def project_latent(projector: LatentProjector, hidden) -> Tensor:
    """
    LatentPlan from response hidden states.

    Parameters
    ----------
    hidden : Tensor or array, shape (L, d), L >= 1

    Returns
    -------
    Tensor of shape (Q, d)
    """
    hidden = as_tensor(hidden)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise DomainError(f"project_latent needs a non-empty (L, d) hidden sequence, got {hidden.shape}")
    if hidden.shape[1] != projector.d:
        raise DomainError(f"hidden width {hidden.shape[1]} != projector width {projector.d}")
    P = projector.params
    q = F.matmul(P['queries'], P['w_q'])
    k = F.matmul(hidden, P['w_k'])
    v = F.matmul(hidden, P['w_v'])
    att = F.softmax(F.matmul(q, F.transpose(k, (1, 0))) * (1.0 / math.sqrt(projector.d)), axis=-1)
    pooled = F.matmul(F.matmul(att, v), P['w_o'])
    return F.layernorm(P['queries'] + pooled, P['ln_g'], P['ln_b'])


def pool_plan(plan: Tensor) -> Tensor:
    """Mean over queries: the (d,) vector the action policy is conditioned on."""
    return F.mean(plan, axis=0)
