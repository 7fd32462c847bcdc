import math

import numpy as np
import pytest

from conftest import analytic_grad, numeric_grad, rel_error, sampled_numeric_grad
from latent_plan_vla.api.sources.demos.demos import PlanningExample, quantize_trajectory, trajectory_response
from latent_plan_vla.api.sources.sim.manipulation import observe
from latent_plan_vla.schemas.configs.config import DecodeConfig
from latent_plan_vla.schemas.episodes.episode import ObjectState, SimState
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import PayloadKind
from latent_plan_vla.schemas.trajectories.trajectory import Point2D, Trajectory
from latent_plan_vla.utils.formatters.general import render_response, render_trajectory
from latent_plan_vla.workflows.components.planner.decoding import (
    greedy_response, nucleus_filter, sample_group, sample_response, sequence_logprob,
)
from latent_plan_vla.workflows.components.planner.model import encode_prompt, encode_window_prompt
from latent_plan_vla.workflows.components.planner.parsing import parse_response
from latent_plan_vla.workflows.components.planner.projector import LatentProjector, pool_plan, project_latent
from latent_plan_vla.workflows.components.planner.sft import cross_entropy
from latent_plan_vla.workflows.transforms.nn import core as F
from latent_plan_vla.workflows.transforms.nn.core import Tensor

INSTRUCTION = 'move the red block to the tray'
REFERENCE = Trajectory.from_xy([(0.5, 0.5), (0.4, 0.45), (0.3, 0.4), (0.2, 0.3),
                                (0.3, 0.5), (0.4, 0.6), (0.5, 0.7), (0.6, 0.8)])


# ---------- vocabulary ----------

def test_detokenize_inverts_tokenize(vocab):
    text = render_response('reach the red block then grasp it',
                           render_trajectory(quantize_trajectory(REFERENCE, vocab)))
    assert vocab.detokenize(vocab.tokenize(text)) == text


def test_tokenize_rejects_unknown_words(vocab):
    with pytest.raises(DomainError):
        vocab.tokenize('<think>teleport</think>')
    with pytest.raises(DomainError):
        vocab.token(vocab.size)


def test_coordinate_bins(vocab):
    assert vocab.coord_id(0.5) - vocab.coord_offset == 32
    assert vocab.coord_id(1.0) - vocab.coord_offset == 63
    assert vocab.coord_value(vocab.coord_offset) == pytest.approx(0.5 / 64)


# ---------- prompts ----------

def test_prompt_deterministic_and_quantised(red_state, vocab, prompt):
    again = encode_prompt(observe(red_state, 0), INSTRUCTION, vocab)
    np.testing.assert_array_equal(prompt, again)
    # [BOS, task, GRIP, x, y, ...]
    assert vocab.token(prompt[3]) == 'C32'
    assert vocab.token(prompt[4]) == 'C32'


def test_prompt_locality(red_state, vocab, prompt):
    moved = SimState(gripper=red_state.gripper, grip_closed=False,
                                objects=(ObjectState(position=Point2D(0.7, 0.3)),), goal=red_state.goal)
    other = encode_prompt(observe(moved, 0), INSTRUCTION, vocab)
    changed = np.flatnonzero(prompt != other)
    assert len(changed) == 1
    assert vocab.is_coord(int(prompt[changed[0]]))


def test_prompt_unknown_instruction(red_state, vocab):
    with pytest.raises(DomainError):
        encode_prompt(observe(red_state, 0), 'juggle the blocks', vocab)


def test_window_prompt_needs_three_observations(red_state, vocab):
    obs = observe(red_state, 0)
    assert vocab.token(encode_window_prompt([obs, obs, obs], INSTRUCTION, vocab)[2]) == '<win>'
    with pytest.raises(DomainError):
        encode_window_prompt([obs, obs], INSTRUCTION, vocab)


# ---------- parsing ----------

def test_parse_well_formed_response(vocab):
    _, tokens = trajectory_response('reach the red block', REFERENCE, vocab)
    parsed = parse_response(tokens, vocab)
    assert parsed.format_ok
    assert parsed.payload_kind is PayloadKind.TRAJECTORY
    assert len(parsed.trajectory) == 8
    err = np.abs(parsed.trajectory.as_array() - REFERENCE.as_array())
    assert err.max() <= 1 / (2 * 64) + 1e-12


def test_parse_seven_points(vocab):
    _, tokens = trajectory_response('reach the red block', Trajectory(REFERENCE.points[:7]), vocab)
    parsed = parse_response(tokens, vocab)
    assert parsed.format_ok
    assert parsed.payload_kind is PayloadKind.INVALID


def test_parse_ignores_tokens_after_eos(vocab):
    _, tokens = trajectory_response('reach the red block', REFERENCE, vocab)
    padded = np.concatenate([tokens, [vocab.pad_id] * 5])
    assert parse_response(padded, vocab) == parse_response(tokens, vocab)


def test_parse_text_outside_tags(vocab):
    tokens = vocab.tokenize('the <think>reach</think> <answer>A</answer>')
    assert not parse_response(tokens, vocab).format_ok


# ---------- decoding ----------

def test_nucleus_filter():
    np.testing.assert_allclose(nucleus_filter(np.array([0.6, 0.3, 0.1]), 0.7), [2 / 3, 1 / 3, 0.0])
    np.testing.assert_allclose(nucleus_filter(np.array([0.1, 0.6, 0.3]), 1e-9), [0.0, 1.0, 0.0])
    np.testing.assert_allclose(nucleus_filter(np.array([0.6, 0.3, 0.1]), 1.0), [0.6, 0.3, 0.1])


def test_sample_response_is_seeded(planner, prompt):
    cfg = DecodeConfig(max_len=12, seed=3)
    a, lp_a = sample_response(planner, prompt, cfg)
    b, lp_b = sample_response(planner, prompt, cfg)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(lp_a, lp_b)
    assert 1 <= len(a) <= 12
    assert np.all(lp_a <= 0.0)


def test_tiny_top_p_is_greedy(planner, prompt):
    sampled, _ = sample_response(planner, prompt, DecodeConfig(max_len=10, top_p=1e-9, seed=5))
    np.testing.assert_array_equal(sampled, greedy_response(planner, prompt, 10))


def test_nucleus_sampling_frequencies(planner, prompt, vocab, monkeypatch):
    logits = np.full(vocab.size, -30.0)
    for tok, p in ((5, 0.5), (9, 0.3), (12, 0.15), (20, 0.05)):
        logits[tok] = math.log(p)
    monkeypatch.setattr(planner, 'next_token_logits', lambda seqs: np.tile(logits, (len(seqs), 1)))
    n = 4000
    samples = sample_group(planner, prompt, DecodeConfig(top_p=0.7), n, rng=np.random.default_rng(8), max_len=1)
    first = np.array([tokens[0] for tokens, _ in samples])
    assert set(first.tolist()) <= {5, 9}
    p = 0.5 / 0.8
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(np.sum(first == 5) - n * p) <= 3 * sigma


def test_sequence_logprob_matches_sampling(planner, prompt):
    tokens, logprobs = sample_response(planner, prompt, DecodeConfig(max_len=16, seed=1))
    np.testing.assert_allclose(sequence_logprob(planner, prompt, tokens).data, logprobs, atol=1e-9)


def test_sequence_logprob_uniform_model(planner, prompt, vocab):
    planner.params['w_out'].data = np.zeros_like(planner.params['w_out'].data)
    lp = sequence_logprob(planner, prompt, [vocab.bos_id, vocab.eos_id]).data
    np.testing.assert_allclose(lp, -math.log(vocab.size))


def test_sequence_logprob_rejects_bad_ids(planner, prompt, vocab):
    with pytest.raises(DomainError):
        sequence_logprob(planner, prompt, [vocab.size + 1])


def test_forward_shapes(planner, prompt, vocab):
    logits, hidden = planner.forward(prompt)
    assert logits.shape == (1, len(prompt), vocab.size)
    assert hidden.shape == (1, len(prompt), planner.cfg.d_model)


# ---------- projector ----------

def test_projector_fixed_shape(small_cfg):
    projector = LatentProjector(small_cfg.model)
    rng = np.random.default_rng(0)
    d, q = small_cfg.model.d_model, small_cfg.model.num_queries
    for length in (1, 10, 1000):
        assert projector(rng.normal(size=(length, d))).shape == (q, d)
    h = rng.normal(size=(7, d))
    np.testing.assert_array_equal(projector(h).data, projector(h).data)
    assert pool_plan(projector(h)).shape == (d,)


def test_projector_rejects_empty(small_cfg):
    with pytest.raises(DomainError):
        project_latent(LatentProjector(small_cfg.model), np.zeros((0, small_cfg.model.d_model)))


def test_projector_gradient(small_cfg):
    projector = LatentProjector(small_cfg.model, seed=2)
    rng = np.random.default_rng(1)
    d, q = small_cfg.model.d_model, small_cfg.model.num_queries
    hidden = Tensor(rng.normal(size=(5, d)), requires_grad=True)
    w = rng.normal(size=(q, d))

    def build():
        return F.sum_(F.mul(project_latent(projector, hidden), w))

    num = numeric_grad(lambda: build().item(), hidden.data)
    assert rel_error(analytic_grad(build, hidden), num) < 1e-4
    for name in ('queries', 'w_q', 'w_k', 'w_v', 'w_o', 'ln_g', 'ln_b'):
        param = projector.params[name]
        num = numeric_grad(lambda: build().item(), param.data)
        assert rel_error(analytic_grad(build, param), num) < 1e-4, name


def test_planner_loss_gradient(planner, prompt, vocab):
    text, response = trajectory_response('reach the red block', REFERENCE, vocab)
    examples = [PlanningExample(prompt=prompt, response=response, text=text, task='red-to-tray', reference=REFERENCE)]

    def build():
        return cross_entropy(planner, examples)

    for name in ('tok_emb', 'pos_emb', 'block0.w_qkv', 'block0.b_o', 'block0.ln2_g', 'block0.w_fc', 'block0.w_proj',
                 'lnf_g', 'w_out'):
        param = planner.params[name]
        grad = analytic_grad(build, param).reshape(-1)
        idx, num = sampled_numeric_grad(lambda: build().item(), param.data, count=12)
        assert rel_error(grad[idx], num) < 1e-4, name


def test_plan_ignores_padding_after_eos(planner, prompt, small_cfg, vocab):
    projector = LatentProjector(small_cfg.model)
    _, tokens = trajectory_response('reach the red block', REFERENCE, vocab)
    padded = np.concatenate([tokens, [vocab.pad_id] * 4])
    a = projector(planner.response_hidden(prompt, tokens)).data
    b = projector(planner.response_hidden(prompt, padded)).data
    np.testing.assert_array_equal(a, b)
