"""
Action-aligned rewards for planner responses.

Signals:
  1. goal reward        endpoint agreement of predicted and reference keypoints
  2. trajectory reward  1 - length-normalised DTW, clamped at 0
  3. format reward      one <think> block then one <answer> block
  4. accuracy reward    option-letter match for choice-style prompts

r_visual = w_goal * r_goal + w_traj * r_traj
r_total  = w_visual * r_visual + w_format * r_format
"""
from __future__ import annotations

from typing import Optional

from latent_plan_vla.schemas.configs.config import RewardConfig
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import PayloadKind
from latent_plan_vla.schemas.trajectories.trajectory import ParsedResponse, Point2D, RewardBreakdown, Trajectory
from latent_plan_vla.utils.formatters.general import split_response
from latent_plan_vla.workflows.transforms.geometry.traj_geom import dtw_distance


def _unit(v: float) -> float:
    return min(1.0, max(0.0, float(v)))


def endpoint_score(p: Point2D, p_hat: Point2D) -> float:
    """f(p, p') = max(0, 1 - |p - p'|^2)"""
    dx = p.x - p_hat.x
    dy = p.y - p_hat.y
    return max(0.0, 1.0 - (dx * dx + dy * dy))


def goal_reward(tau: Trajectory, tau_hat: Trajectory) -> float:
    if len(tau) < 2 or len(tau_hat) < 2:
        raise DomainError(f"goal_reward needs >= 2 points, got {len(tau)} and {len(tau_hat)}")
    return 0.5 * (endpoint_score(tau.start, tau_hat.start) + endpoint_score(tau.end, tau_hat.end))


def trajectory_reward(tau: Trajectory, tau_hat: Trajectory) -> float:
    return max(0.0, 1.0 - dtw_distance(tau, tau_hat))


def format_reward(text: str) -> float:
    return 1.0 if split_response(text) is not None else 0.0


def accuracy_reward(answer: str, gold: str) -> float:
    # case-insensitive, surrounding whitespace ignored
    return 1.0 if answer.strip().upper() == gold.strip().upper() else 0.0


def combine_rewards(r_goal: float, r_traj: float, r_format: float, cfg: RewardConfig) -> RewardBreakdown:
    r_goal, r_traj, r_format = _unit(r_goal), _unit(r_traj), _unit(r_format)
    r_visual = _unit(cfg.w_goal * r_goal + cfg.w_traj * r_traj)
    r_total = _unit(cfg.w_visual * r_visual + cfg.w_format * r_format)
    return RewardBreakdown(r_goal=r_goal, r_traj=r_traj, r_format=r_format, r_visual=r_visual, r_total=r_total)


def total_reward(
        parsed: ParsedResponse,
        tau_hat: Optional[Trajectory],
        cfg: RewardConfig,
        gold: Optional[str] = None,
) -> RewardBreakdown:
    """
    Score one parsed response.

    An invalid payload (bad coordinates, wrong arity, unparsable answer) zeroes
    the goal and trajectory terms while the format term is still judged on the
    tags. Choice payloads scored against a gold letter use accuracy as the
    visual term.
    """
    r_format = 1.0 if parsed.format_ok else 0.0
    if parsed.payload_kind is PayloadKind.CHOICE and gold is not None:
        acc = accuracy_reward(parsed.option or '', gold)
        r_total = _unit(cfg.w_visual * acc + cfg.w_format * r_format)
        return RewardBreakdown(r_format=r_format, r_visual=acc, r_total=r_total, kind='choice')
    if parsed.payload_kind is not PayloadKind.TRAJECTORY or tau_hat is None:
        return combine_rewards(0.0, 0.0, r_format, cfg)
    tau = parsed.trajectory
    return combine_rewards(goal_reward(tau, tau_hat), trajectory_reward(tau, tau_hat), r_format, cfg)
