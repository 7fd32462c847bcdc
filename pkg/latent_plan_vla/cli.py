"""
latent-plan-vla command line.

    latent-plan-vla <subcommand> [--config PATH] [--seed N] [--out DIR] [--log-level LEVEL]

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from latent_plan_vla.api.sources.demos.demos import generate_demos
from latent_plan_vla.api.stores.checkpoints import (
    load_action, load_demos, load_plan_cache, load_planner, save_action, save_demos, save_plan_cache, save_planner,
)
from latent_plan_vla.schemas.configs.config import RunConfig, dump_config, load_config
from latent_plan_vla.schemas.general.errors import CheckpointError, ConfigError, LatentPlanError
from latent_plan_vla.utils.formatters.traces import traces_frame, write_traces_svg
from latent_plan_vla.utils.utils import put_dataframe
from latent_plan_vla.workflows.components.executor.ablations import (
    ablate_n, ablate_rewards, adapt_few_shot, study_self_correction,
)
from latent_plan_vla.workflows.components.executor.runner import Agent, EvaluationComponent
from latent_plan_vla.workflows.components.grpo.trainer import GrpoComponent
from latent_plan_vla.workflows.components.planner.sft import PlannerSftComponent
from latent_plan_vla.workflows.components.policy.imitation import ActionComponent, build_plan_cache

logger = logging.getLogger('latent_plan_vla')

SUBCOMMANDS = ['gen-data', 'train-planner-sft', 'train-planner-rl', 'train-action', 'eval', 'ablate-reward',
               'ablate-n', 'export-traces', 'adapt-few-shot']


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1, not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='TOML run configuration (default: built-in)')
    common.add_argument('--seed', type=int, default=None, help='overrides the config seed')
    common.add_argument('--out', type=Path, default=None, help='overrides paths.out_dir')
    common.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ...')

    parser = _Parser(prog='latent-plan-vla', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', metavar='subcommand', parser_class=_Parser)
    sub.required = True
    sub.add_parser('gen-data', parents=[common], help='expert demos (+ cached plans when a planner exists)')
    sub.add_parser('train-planner-sft', parents=[common], help='planner cold start')
    sub.add_parser('train-planner-rl', parents=[common], help='GRPO fine-tuning of the planner')
    sub.add_parser('train-action', parents=[common], help='diffusion policy + projector imitation')
    ev = sub.add_parser('eval', parents=[common], help='success metrics over seeded episodes')
    ev.add_argument('--self-correct', action='store_true', help='compare windowed replanning against one plan')
    ev.add_argument('--episodes', type=int, default=None)
    sub.add_parser('ablate-reward', parents=[common], help='reward-variant ablation')
    sub.add_parser('ablate-n', parents=[common], help='replanning-interval ablation')
    tr = sub.add_parser('export-traces', parents=[common], help='episode CSV traces and SVG overlay')
    tr.add_argument('--episodes', type=int, default=5)
    fs = sub.add_parser('adapt-few-shot', parents=[common], help='fine-tune the action policy on a new task')
    fs.add_argument('--task', default=None)
    fs.add_argument('--episodes', type=int, default=100)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    update = {}
    if args.seed is not None:
        update['seed'] = args.seed
    if args.out is not None:
        update['paths'] = cfg.paths.model_copy(update={'out_dir': str(args.out)})
    if args.log_level is not None:
        update['train'] = cfg.train.model_copy(update={'log_level': args.log_level.upper()})
    return cfg.model_copy(update=update) if update else cfg


#####################################
# Loaders
#####################################

def _demos(cfg: RunConfig, n: Optional[int] = None):
    demos, _ = load_demos(cfg.paths.resolve('demos'))
    return demos if n is None else demos[:n]


def _latest_planner(cfg: RunConfig):
    for name in ('planner_rl', 'planner_sft'):
        path = cfg.paths.resolve(name)
        if path.exists():
            logger.info("using planner %s", path)
            return load_planner(path, cfg.model)
    raise CheckpointError(f"no planner checkpoint under {cfg.paths.out_dir}")


def _agent(cfg: RunConfig) -> Agent:
    planner = _latest_planner(cfg)
    policy, projector, zero_plan = load_action(cfg.paths.resolve('action'), cfg.diffusion, cfg.model)
    return Agent(planner=planner, projector=projector, policy=policy, zero_plan=zero_plan, max_len=cfg.grpo.max_len)


#####################################
# Subcommands
#####################################

def cmd_gen_data(cfg: RunConfig, args) -> None:
    n = max(cfg.sft.demos, cfg.imitation.demos)
    demos = generate_demos(cfg.sim.train_tasks, n, cfg.seed, horizon=cfg.sim.horizon, max_retries=cfg.sim.max_retries)
    save_demos(cfg.paths.resolve('demos'), demos, cfg.model.num_keypoints, cfg.diffusion.chunk_horizon,
               cfg.model.coord_bins)
    try:
        planner = _latest_planner(cfg)
    except CheckpointError:
        logger.info("no planner checkpoint yet; plan cache skipped")
        return
    cache = build_plan_cache(planner, demos[:cfg.imitation.demos], cfg.executor.actions_per_plan, cfg.grpo.max_len,
                             progress=cfg.train.progress)
    save_plan_cache(cfg.paths.resolve('plan_cache'), cache)


def cmd_train_planner_sft(cfg: RunConfig, args) -> None:
    component = PlannerSftComponent(cfg, _demos(cfg, cfg.sft.demos))
    log = component.run_pipeline()
    put_dataframe(log.drop(columns=['wall_ms']), Path(cfg.paths.out_dir) / 'sft_log.jsonl')
    save_planner(cfg.paths.resolve('planner_sft'), component.model)


def cmd_train_planner_rl(cfg: RunConfig, args) -> None:
    model = load_planner(cfg.paths.resolve('planner_sft'), cfg.model)
    component = GrpoComponent(cfg, _demos(cfg, cfg.sft.demos), model)
    log = component.run_pipeline()
    put_dataframe(log.drop(columns=['wall_ms']), Path(cfg.paths.out_dir) / 'rl_log.jsonl')
    save_planner(cfg.paths.resolve('planner_rl'), model)


def cmd_train_action(cfg: RunConfig, args) -> None:
    planner = _latest_planner(cfg)
    demos = _demos(cfg, cfg.imitation.demos)
    cache_path = cfg.paths.resolve('plan_cache')
    cache = None
    if cache_path.exists():
        cache = load_plan_cache(cache_path)
        if cache.checksum != planner.checksum() or cache.actions_per_plan != cfg.executor.actions_per_plan:
            logger.info("plan cache is stale, rebuilding")
            cache = None
    component = ActionComponent(cfg, demos, planner, cache=cache)
    if cache is None:
        save_plan_cache(cache_path, component.cache)
    log = component.run_pipeline()
    put_dataframe(log.drop(columns=['wall_ms']), Path(cfg.paths.out_dir) / 'imitation_log.jsonl')
    save_action(cfg.paths.resolve('action'), component.policy, component.projector, component.zero_plan)


def cmd_eval(cfg: RunConfig, args) -> None:
    agent = _agent(cfg)
    out = Path(cfg.paths.out_dir) / 'metrics.jsonl'
    if args.self_correct:
        metrics, gain = study_self_correction(agent, cfg, episodes=args.episodes)
        print(f"self-correction gain: {gain:.1f} success points")
    else:
        ex = cfg.executor if args.episodes is None else cfg.executor.model_copy(update={'episodes': args.episodes})
        metrics = EvaluationComponent(cfg, agent, executor=ex).run_pipeline()
    put_dataframe(metrics, out)
    print(metrics.to_string(index=False))


def cmd_ablate_reward(cfg: RunConfig, args) -> None:
    sft = load_planner(cfg.paths.resolve('planner_sft'), cfg.model)
    report, ordering = ablate_rewards(cfg, _demos(cfg, cfg.sft.demos), sft)
    put_dataframe(report, Path(cfg.paths.out_dir) / 'ablate_reward.csv')
    print(report.to_string(index=False))
    for flag, ok in ordering.items():
        logger.info("%s: %s", flag, ok)


def cmd_ablate_n(cfg: RunConfig, args) -> None:
    report, flags = ablate_n(_agent(cfg), cfg)
    put_dataframe(report, Path(cfg.paths.out_dir) / 'ablate_n.csv')
    print(report.to_string(index=False))
    for flag, ok in flags.items():
        logger.info("%s: %s", flag, ok)


def cmd_export_traces(cfg: RunConfig, args) -> None:
    episodes = EvaluationComponent(cfg, _agent(cfg)).trace_episodes(args.episodes, seed=cfg.seed)
    out = Path(cfg.paths.out_dir)
    put_dataframe(traces_frame(episodes), out / 'traces.csv')
    write_traces_svg(episodes, out / 'traces.svg')


def cmd_adapt_few_shot(cfg: RunConfig, args) -> None:
    adapted, log, metrics = adapt_few_shot(_agent(cfg), cfg, task_name=args.task, episodes=args.episodes)
    out = Path(cfg.paths.out_dir)
    put_dataframe(log.drop(columns=['wall_ms']), out / 'few_shot_log.jsonl')
    put_dataframe(metrics, out / 'few_shot_metrics.jsonl')
    print(metrics.to_string(index=False))


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train-planner-sft': cmd_train_planner_sft,
    'train-planner-rl': cmd_train_planner_rl,
    'train-action': cmd_train_action,
    'eval': cmd_eval,
    'ablate-reward': cmd_ablate_reward,
    'ablate-n': cmd_ablate_n,
    'export-traces': cmd_export_traces,
    'adapt-few-shot': cmd_adapt_few_shot,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"latent-plan-vla: config error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, cfg.train.log_level.upper(), logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)
    try:
        dump_config(cfg, Path(cfg.paths.out_dir) / 'config.toml')
        COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"latent-plan-vla: config error: {e}", file=sys.stderr)
        return 1
    except LatentPlanError as e:
        logger.debug("failure", exc_info=True)
        print(f"latent-plan-vla: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        logger.debug("unexpected failure", exc_info=True)
        print(f"latent-plan-vla: unexpected error: {e!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
