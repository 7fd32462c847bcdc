import numpy as np
import pytest

from conftest import analytic_grad, numeric_grad, rel_error, sampled_numeric_grad
from latent_plan_vla.api.sources.demos.demos import generate_demos
from latent_plan_vla.api.sources.sim.manipulation import observe
from latent_plan_vla.schemas.configs.config import DiffusionConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.components.planner.projector import LatentProjector
from latent_plan_vla.workflows.components.policy.diffusion import (
    DiffusionPolicy, NoiseSchedule, StateFeatures, batch_ddpm_loss, ddim_sample, ddim_step, ddpm_loss,
    denormalize_chunk, normalize_chunk,
)
from latent_plan_vla.workflows.components.policy import imitation
from latent_plan_vla.workflows.components.policy.imitation import (
    build_dataset, build_plan_cache, expert_chunk, imitation_train,
)
from latent_plan_vla.workflows.transforms.nn.core import Tape, Tensor
from latent_plan_vla.workflows.transforms.nn.optim import adam_step

D = 16


@pytest.fixture(scope='module')
def demos():
    return generate_demos(['red-to-tray'], 2, seed=0, horizon=120)


@pytest.fixture
def policy():
    return DiffusionPolicy(DiffusionConfig(train_steps=50, infer_steps=5, hidden=32), D, seed=0)


@pytest.fixture
def state(red_state):
    return StateFeatures.from_observation(observe(red_state, 0))


# ---------- schedule ----------

def test_alpha_bar_strictly_decreasing():
    schedule = NoiseSchedule(1000, 20, 1e-4, 2e-2)
    assert np.all(np.diff(schedule.alphas_cumprod) < 0)
    assert schedule.alpha_bar(-1) == 1.0


def test_infer_timesteps():
    steps = NoiseSchedule(1000, 20, 1e-4, 2e-2).infer_timesteps()
    assert len(steps) == 20
    assert steps[0] == 999 and steps[-1] == 0
    assert np.all(np.diff(steps) < 0)


def test_bad_schedule():
    with pytest.raises(DomainError):
        NoiseSchedule(10, 20, 1e-4, 2e-2)
    with pytest.raises(DomainError):
        NoiseSchedule(10, 5, 2e-2, 1e-4)


def test_reconstruction_identity():
    schedule = NoiseSchedule(1000, 20, 1e-4, 2e-2)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, size=(8, 3))
    noise = rng.standard_normal((8, 3))
    for t in (0, 500, 999):
        x_t = schedule.add_noise(x0, t, noise)
        np.testing.assert_allclose(schedule.predict_x0(x_t, t, noise), x0, atol=1e-8)


def test_ddim_full_step_with_oracle_noise():
    schedule = NoiseSchedule(1000, 20, 1e-4, 2e-2)
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, size=24)
    noise = rng.standard_normal(24)
    x_t = schedule.add_noise(x0, 999, noise)
    np.testing.assert_allclose(ddim_step(x_t, noise, 999, -1, schedule), x0, atol=1e-6)


# ---------- loss ----------

def test_zero_predictor_loss_is_noise_power(policy, state):
    rng = np.random.default_rng(2)
    b = 256
    noise = rng.standard_normal((b, policy.horizon, 3))
    chunks = rng.uniform(-1, 1, size=(b, policy.horizon, 3))
    t = rng.integers(0, 50, size=b)
    policy.params['w_out'].data = np.zeros_like(policy.params['w_out'].data)
    feats = np.tile(state.features, (b, 1))
    loss = batch_ddpm_loss(policy, feats, np.zeros(b, dtype=int), np.zeros((b, D)), chunks, t, noise)
    assert loss.item() == pytest.approx(1.0, abs=0.1)
    assert loss.item() == pytest.approx(float(np.mean(noise ** 2)))


def test_oracle_predictor_has_zero_loss(policy, state, monkeypatch):
    rng = np.random.default_rng(3)
    noise = rng.standard_normal((4, policy.horizon, 3))
    monkeypatch.setattr(policy, 'predict_noise', lambda *args: Tensor(noise.reshape(4, -1)))
    loss = batch_ddpm_loss(policy, np.tile(state.features, (4, 1)), [0] * 4, np.zeros((4, D)),
                           rng.uniform(-1, 1, size=noise.shape), [0, 10, 20, 49], noise)
    assert loss.item() == 0.0


def test_ddpm_loss_timestep_range(policy, state):
    chunk = np.zeros((policy.horizon, 3))
    noise = np.zeros_like(chunk)
    assert ddpm_loss(policy, state, np.zeros(D), chunk, 0, noise).item() >= 0.0
    with pytest.raises(DomainError):
        ddpm_loss(policy, state, np.zeros(D), chunk, 50, noise)
    with pytest.raises(DomainError):
        ddpm_loss(policy, state, np.zeros(D), chunk, -1, noise)


def test_ddpm_loss_accepts_unpooled_plan(policy, state):
    chunk = np.zeros((policy.horizon, 3))
    noise = np.random.default_rng(0).standard_normal(chunk.shape)
    plan = np.random.default_rng(1).normal(size=(4, D))
    pooled = ddpm_loss(policy, state, plan.mean(axis=0), chunk, 10, noise).item()
    assert ddpm_loss(policy, state, plan, chunk, 10, noise).item() == pytest.approx(pooled)
    with pytest.raises(DomainError):
        ddpm_loss(policy, state, np.zeros((4, D + 1)), chunk, 10, noise)


def test_ddpm_loss_gradient(policy, state):
    rng = np.random.default_rng(5)
    chunk = rng.uniform(-0.05, 0.05, size=(policy.horizon, 3))
    noise = rng.standard_normal(chunk.shape)
    plan = Tensor(rng.normal(size=(4, D)), requires_grad=True)

    def build():
        return ddpm_loss(policy, state, plan, chunk, 17, noise)

    for name in ('task_emb', 'w_state', 'b_state', 'w_in', 'b_in', 'w_mid', 'b_mid', 'w_out', 'b_out'):
        param = policy.params[name]
        grad = analytic_grad(build, param).reshape(-1)
        idx, num = sampled_numeric_grad(lambda: build().item(), param.data, count=16)
        assert rel_error(grad[idx], num) < 1e-4, name
    num = numeric_grad(lambda: build().item(), plan.data)
    assert rel_error(analytic_grad(build, plan), num) < 1e-4


# ---------- sampler ----------

def test_ddim_sample_deterministic_and_bounded(policy, state):
    plan = np.random.default_rng(0).normal(size=(4, D))
    a = ddim_sample(policy, state, plan, seed=7)
    b = ddim_sample(policy, state, plan, seed=7)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (policy.horizon, 3)
    assert np.all(np.abs(a[:, :2]) <= policy.cfg.max_step)
    assert np.all(np.abs(a[:, 2]) <= 1.0)


def test_ddim_recovers_a_memorised_chunk(state):
    cfg = DiffusionConfig(train_steps=50, infer_steps=50, beta_end=0.2, chunk_horizon=2, hidden=64, state_embed=8)
    policy = DiffusionPolicy(cfg, D, seed=0)
    target = np.array([[0.03, -0.02, 1.0], [-0.01, 0.04, -1.0]])
    b, steps = 128, 4000
    chunks = np.repeat(normalize_chunk(target, cfg.max_step)[None], b, axis=0)
    features = np.tile(state.features, (b, 1))
    task_ids = [state.task_id] * b
    pooled = np.zeros((b, D))
    rng = np.random.default_rng(0)
    for i in range(steps):
        t = rng.integers(0, cfg.train_steps, size=b)
        noise = rng.standard_normal(chunks.shape)
        with Tape() as tape:
            loss = batch_ddpm_loss(policy, features, task_ids, pooled, chunks, t, noise)
        tape.backward(loss, store=policy.params)
        adam_step(policy.params, lr=3e-3 * 0.1 ** (i / steps))
    for seed in range(3):
        sample = ddim_sample(policy, state, np.zeros(D), seed=seed)
        assert np.max(np.abs(sample - target)) <= 0.02


def test_chunk_normalisation():
    chunk = np.array([[0.05, -0.025, 1.0]])
    np.testing.assert_allclose(normalize_chunk(chunk, 0.05), [[1.0, -0.5, 1.0]])
    np.testing.assert_allclose(denormalize_chunk([[3.0, -0.5, -2.0]], 0.05), [[0.05, -0.025, -1.0]])


def test_expert_chunk_pads_with_last_grip():
    actions = np.array([[0.01, 0.0, -1.0], [0.0, 0.02, 1.0]])
    chunk = expert_chunk(actions, 1, 3)
    np.testing.assert_array_equal(chunk, [[0.0, 0.02, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])


# ---------- imitation ----------

def test_plan_cache_covers_every_boundary(small_cfg, vocab, demos):
    planner = PlannerModel(small_cfg.model, vocab)
    cache = build_plan_cache(planner, demos, 15, 24, progress=False)
    assert len(cache) == sum(-(-len(ep) // 15) for ep, _ in demos)
    assert cache.checksum == planner.checksum()
    dataset = build_dataset(demos, cache, 8)
    assert len(dataset) == sum(len(ep) for ep, _ in demos)
    assert dataset.chunks.shape[1:] == (8, 3)


def test_cache_mismatch_raises(small_cfg, vocab, demos):
    planner = PlannerModel(small_cfg.model, vocab)
    cache = build_plan_cache(planner, demos[:1], 15, 24, progress=False)
    with pytest.raises(DomainError):
        build_dataset(demos, cache, 8)
    other = PlannerModel(small_cfg.model, vocab, seed=9)
    dataset = build_dataset(demos[:1], cache, 8)
    with pytest.raises(DomainError):
        imitation_train(DiffusionPolicy(small_cfg.diffusion, D), LatentProjector(small_cfg.model), cache, dataset,
                        steps=1, planner=other, progress=False)


def test_imitation_keeps_planner_frozen(small_cfg, vocab, demos):
    planner = PlannerModel(small_cfg.model, vocab)
    cache = build_plan_cache(planner, demos[:1], 15, 24, progress=False)
    dataset = build_dataset(demos[:1], cache, small_cfg.diffusion.chunk_horizon)
    policy = DiffusionPolicy(small_cfg.diffusion, D)
    projector = LatentProjector(small_cfg.model)
    before = (planner.checksum(), policy.checksum(), projector.params.checksum())
    log = imitation_train(policy, projector, cache, dataset, lr=1e-3, steps=3, batch_size=8, planner=planner,
                          progress=False)
    assert len(log) == 3
    assert planner.checksum() == before[0]
    assert policy.checksum() != before[1]
    assert projector.params.checksum() != before[2]


def test_zero_plan_leaves_projector(small_cfg, vocab, demos):
    planner = PlannerModel(small_cfg.model, vocab)
    cache = build_plan_cache(planner, demos[:1], 15, 24, progress=False)
    dataset = build_dataset(demos[:1], cache, small_cfg.diffusion.chunk_horizon)
    projector = LatentProjector(small_cfg.model)
    before = projector.params.checksum()
    imitation_train(DiffusionPolicy(small_cfg.diffusion, D), projector, cache, dataset, steps=2, batch_size=4,
                    zero_plan=True, progress=False)
    assert projector.params.checksum() == before


def test_imitation_raises_if_planner_moves(small_cfg, vocab, demos, monkeypatch):
    planner = PlannerModel(small_cfg.model, vocab)
    cache = build_plan_cache(planner, demos[:1], 15, 24, progress=False)
    dataset = build_dataset(demos[:1], cache, small_cfg.diffusion.chunk_horizon)

    def leaky_step(store, lr):
        adam_step(store, lr)
        planner.params['lnf_g'].data = planner.params['lnf_g'].data + 1.0

    monkeypatch.setattr(imitation, 'adam_step', leaky_step)
    with pytest.raises(DomainError, match='planner parameters changed'):
        imitation_train(DiffusionPolicy(small_cfg.diffusion, D), LatentProjector(small_cfg.model), cache, dataset,
                        steps=1, batch_size=4, planner=planner, progress=False)
