from __future__ import annotations

import hashlib
from typing import Dict, Iterator, Tuple

import numpy as np

from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.workflows.transforms.nn.core import DTYPE, Tensor


class ParamStore:
    """
    Named parameters with per-parameter Adam moments.
    - moment shapes always match parameter shapes
    - step only grows
    """

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0
        self.stage_start = 0

    def __repr__(self):
        return f"ParamStore({len(self.params)} params, {self.size()} values, step={self.step})"

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def size(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise DomainError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def fill_missing_grads(self):
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def reset_moments(self):
        """Fresh optimizer state for a new training stage."""
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
        self.stage_start = self.step

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def clone(self) -> 'ParamStore':
        """Trainable deep copy: values, Adam moments and counters."""
        snap = ParamStore()
        for name, p in self.params.items():
            snap.add(name, p.data.copy())
            snap.m[name] = self.m[name].copy()
            snap.v[name] = self.v[name].copy()
        snap.step = self.step
        snap.stage_start = self.stage_start
        return snap

    def snapshot(self) -> 'ParamStore':
        """Immutable copy of the current values for read-only inference."""
        snap = self.clone()
        snap.freeze()
        return snap

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode('utf-8'))
            h.update(np.ascontiguousarray(self.params[name].data, dtype='<f8').tobytes())
        return h.hexdigest()

    # ---------- persistence ----------
    def to_arrays(self, prefix: str = '') -> Dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            out[f'{prefix}param/{name}'] = p.data
            out[f'{prefix}adam_m/{name}'] = self.m[name]
            out[f'{prefix}adam_v/{name}'] = self.v[name]
        out[f'{prefix}adam_step'] = np.array([self.step, self.stage_start], dtype=np.int64)
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = ''):
        for name, p in self.params.items():
            key = f'{prefix}param/{name}'
            if key not in arrays:
                raise DomainError(f"checkpoint is missing {key}")
            value = np.asarray(arrays[key], dtype=DTYPE)
            if value.shape != p.data.shape:
                raise DomainError(f"{key} has shape {value.shape}, expected {p.data.shape}")
            p.data = value.copy()
            self.m[name] = np.asarray(arrays.get(f'{prefix}adam_m/{name}', np.zeros_like(value)), dtype=DTYPE).copy()
            self.v[name] = np.asarray(arrays.get(f'{prefix}adam_v/{name}', np.zeros_like(value)), dtype=DTYPE).copy()
        if f'{prefix}adam_step' in arrays:
            counters = arrays[f'{prefix}adam_step']
            self.step = int(counters[0])
            self.stage_start = int(counters[1]) if len(counters) > 1 else 0


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update over every parameter, then clear gradients."""
    store.step += 1
    t = store.step - store.stage_start
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


def grad_norm(store: ParamStore) -> float:
    total = 0.0
    for p in store.params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad ** 2))
    return float(np.sqrt(total))
