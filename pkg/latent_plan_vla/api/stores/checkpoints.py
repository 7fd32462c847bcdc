"""
Typed stores on top of the TAKT container: expert demo datasets, plan
caches, planner checkpoints and action checkpoints.
"""
from __future__ import annotations

import logging
from typing import Dict, List, Tuple

import numpy as np

from latent_plan_vla.api.sources.demos.demos import Demo
from latent_plan_vla.api.sources.sim.manipulation import observe, state_features, state_from_features
from latent_plan_vla.api.stores.takt import load_arrays, save_arrays
from latent_plan_vla.schemas.configs.config import DiffusionConfig, ModelConfig
from latent_plan_vla.schemas.episodes.episode import ActionCommand, Episode, StepRecord
from latent_plan_vla.schemas.general.errors import CheckpointError
from latent_plan_vla.schemas.general.general import ACTION_DIM, COORD_BINS, STATE_FEATURE_DIM
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.components.planner.projector import LatentProjector
from latent_plan_vla.workflows.components.planner.vocab import TokenVocab
from latent_plan_vla.workflows.components.policy.diffusion import DiffusionPolicy
from latent_plan_vla.workflows.components.policy.imitation import PlanCache

logger = logging.getLogger(__name__)


def _text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode('ascii'), dtype=np.uint8).astype(np.int64)


def _array_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode('ascii')


def _require(arrays: Dict[str, np.ndarray], *keys: str):
    missing = [k for k in keys if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint is missing {missing}")


#####################################
# Demo datasets
#####################################

def save_demos(path, demos: List[Demo], k: int, horizon: int, bins: int = COORD_BINS):
    """
    Header [K, H, feature dim, action dim, coord bins], then per-step state
    features, actions and done flags, indexed per episode by offsets.
    """
    features, actions, done = [], [], []
    state_offsets, action_offsets = [0], [0]
    task, seed, succ, failure = [], [], [], []
    for episode, _ in demos:
        states = [episode.initial_state] + [r.state for r in episode.records]
        features += [state_features(s) for s in states]
        acts = [r.action.as_array() for r in episode.records]
        actions += acts
        done += [0] * max(0, len(acts) - 1) + ([1] if acts else [])
        state_offsets.append(len(features))
        action_offsets.append(len(actions))
        task.append(episode.task_id)
        seed.append(episode.seed)
        succ.append(int(episode.success))
        failure.append(-1 if episode.failure_step is None else episode.failure_step)
    arrays = {
        'header': np.array([k, horizon, STATE_FEATURE_DIM, ACTION_DIM, bins], dtype=np.int64),
        'features': np.asarray(features, dtype=np.float64).reshape(-1, STATE_FEATURE_DIM),
        'actions': np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIM),
        'done': np.asarray(done, dtype=np.int64),
        'state_offsets': np.asarray(state_offsets, dtype=np.int64),
        'action_offsets': np.asarray(action_offsets, dtype=np.int64),
        'task': np.asarray(task, dtype=np.int64),
        'seed': np.asarray(seed, dtype=np.int64),
        'success': np.asarray(succ, dtype=np.int64),
        'failure_step': np.asarray(failure, dtype=np.int64),
    }
    logger.info("saving %d demos to %s", len(demos), path)
    return save_arrays(path, arrays)


def load_demos(path) -> Tuple[List[Demo], np.ndarray]:
    """
    Returns:
        (demos, header) with header = [K, H, feature dim, action dim, coord bins]
    """
    a = load_arrays(path)
    _require(a, 'header', 'features', 'actions', 'state_offsets', 'action_offsets', 'task', 'seed', 'success')
    header = a['header']
    if int(header[2]) != STATE_FEATURE_DIM or int(header[3]) != ACTION_DIM:
        raise CheckpointError(f"demo file {path} has feature/action dims {header[2:4]}")
    bins = int(header[4])
    demos = []
    for i in range(len(a['task'])):
        s0, s1 = a['state_offsets'][i:i + 2]
        a0, a1 = a['action_offsets'][i:i + 2]
        task_id = int(a['task'][i])
        states = [state_from_features(f, t) for t, f in enumerate(a['features'][s0:s1])]
        records = [
            StepRecord(step=t, observation=observe(states[t], task_id, bins),
                       action=ActionCommand(*(float(v) for v in act)), state=states[t + 1])
            for t, act in enumerate(a['actions'][a0:a1])
        ]
        failure = int(a['failure_step'][i]) if 'failure_step' in a else -1
        episode = Episode(task_id=task_id, seed=int(a['seed'][i]), initial_state=states[0], records=records,
                          success=bool(a['success'][i]), failure_step=None if failure < 0 else failure)
        demos.append((episode, episode.gripper_path()))
    return demos, header


#####################################
# Plan caches
#####################################

def save_plan_cache(path, cache: PlanCache):
    lengths = [len(h) for h in cache.hidden]
    d = cache.hidden[0].shape[1] if cache.hidden else 0
    arrays = {
        'hidden': np.concatenate(cache.hidden, axis=0) if cache.hidden else np.zeros((0, d)),
        'offsets': np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        'episode': cache.episode,
        'step': cache.step,
        'seed': cache.seed,
        'actions_per_plan': np.array([cache.actions_per_plan], dtype=np.int64),
        'checksum': _text_array(cache.checksum),
    }
    return save_arrays(path, arrays)


def load_plan_cache(path) -> PlanCache:
    a = load_arrays(path)
    _require(a, 'hidden', 'offsets', 'episode', 'step', 'seed', 'actions_per_plan', 'checksum')
    off = a['offsets']
    hidden = [a['hidden'][off[i]:off[i + 1]].copy() for i in range(len(off) - 1)]
    return PlanCache(checksum=_array_text(a['checksum']), actions_per_plan=int(a['actions_per_plan'][0]),
                     episode=a['episode'], step=a['step'], seed=a['seed'], hidden=hidden)


#####################################
# Model checkpoints
#####################################

def save_planner(path, model: PlannerModel):
    arrays = model.params.to_arrays('planner/')
    arrays['vocab_digest'] = _text_array(model.vocab.digest())
    return save_arrays(path, arrays)


def load_planner(path, cfg: ModelConfig) -> PlannerModel:
    """
    Raises:
        CheckpointError: the checkpoint was written with a different vocabulary.
    """
    a = load_arrays(path)
    _require(a, 'vocab_digest')
    vocab = TokenVocab(cfg.coord_bins)
    if _array_text(a['vocab_digest']) != vocab.digest():
        raise CheckpointError(f"{path} was written with a different token vocabulary")
    model = PlannerModel(cfg, vocab)
    try:
        model.params.load_arrays(a, 'planner/')
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return model


def save_action(path, policy: DiffusionPolicy, projector: LatentProjector, zero_plan: bool = False):
    arrays = {**policy.params.to_arrays('policy/'), **projector.params.to_arrays('projector/')}
    arrays['zero_plan'] = np.array([int(zero_plan)], dtype=np.int64)
    return save_arrays(path, arrays)


def load_action(path, diffusion: DiffusionConfig, model: ModelConfig) -> Tuple[DiffusionPolicy, LatentProjector, bool]:
    a = load_arrays(path)
    _require(a, 'zero_plan')
    policy = DiffusionPolicy(diffusion, model.d_model)
    projector = LatentProjector(model)
    try:
        policy.params.load_arrays(a, 'policy/')
        projector.params.load_arrays(a, 'projector/')
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return policy, projector, bool(a['zero_plan'][0])
