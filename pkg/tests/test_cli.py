from latent_plan_vla.api.stores.checkpoints import load_demos, save_action, save_planner
from latent_plan_vla.cli import main
from latent_plan_vla.schemas.configs.config import load_config
from latent_plan_vla.workflows.components.planner.model import PlannerModel
from latent_plan_vla.workflows.components.planner.projector import LatentProjector
from latent_plan_vla.workflows.components.planner.vocab import TokenVocab
from latent_plan_vla.workflows.components.policy.diffusion import DiffusionPolicy

SMALL = """
[sim]
horizon = 120

[sft]
demos = 2

[imitation]
demos = 2

[train]
progress = false
"""

EVAL = """
[model]
d_model = 16
n_layers = 1
n_heads = 2
max_positions = 256
num_queries = 4

[grpo]
max_len = 8

[diffusion]
train_steps = 50
infer_steps = 5
hidden = 32

[executor]
episodes = 2
horizon = 10
seeds = [0]

[train]
progress = false
"""


def test_unknown_subcommand():
    assert main(['fly']) == 1


def test_missing_subcommand():
    assert main([]) == 1


def test_missing_config(tmp_path):
    assert main(['eval', '--config', str(tmp_path / 'absent.toml')]) == 1


def test_invalid_config(tmp_path):
    path = tmp_path / 'bad.toml'
    path.write_text('[grpo]\ngroup_size = 1\n')
    assert main(['eval', '--config', str(path)]) == 1


def test_missing_checkpoint_is_runtime_failure(tmp_path):
    assert main(['eval', '--out', str(tmp_path)]) == 2


def test_gen_data(tmp_path):
    path = tmp_path / 'small.toml'
    path.write_text(SMALL)
    assert main(['gen-data', '--config', str(path), '--out', str(tmp_path / 'run'), '--seed', '3']) == 0
    demos, header = load_demos(tmp_path / 'run' / 'demos.takt')
    assert len(demos) == 2
    assert all(ep.success for ep, _ in demos)
    assert (tmp_path / 'run' / 'config.toml').exists()


def test_eval_is_reproducible(tmp_path):
    path = tmp_path / 'eval.toml'
    path.write_text(EVAL)
    cfg = load_config(path)
    run = tmp_path / 'run'
    save_planner(run / 'planner_sft.takt', PlannerModel(cfg.model, TokenVocab(), seed=0))
    save_action(run / 'action.takt', DiffusionPolicy(cfg.diffusion, cfg.model.d_model, seed=1),
                LatentProjector(cfg.model, seed=2))
    args = ['eval', '--config', str(path), '--out', str(run)]
    assert main(args) == 0
    first = (run / 'metrics.jsonl').read_bytes()
    assert main(args) == 0
    assert (run / 'metrics.jsonl').read_bytes() == first
    assert b'success_rate' in first
