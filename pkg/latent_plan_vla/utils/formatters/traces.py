from pathlib import Path
from typing import Sequence

import pandas as pd

from latent_plan_vla.api.sources.sim.manipulation import success
from latent_plan_vla.api.sources.sim.tasks import TASKS_BY_ID
from latent_plan_vla.schemas.episodes.episode import Episode

TRACE_COLUMNS = ['episode', 'step', 'gripper_x', 'gripper_y', 'grip', 'obj_x', 'obj_y', 'held', 'success']


def traces_frame(episodes: Sequence[Episode]) -> pd.DataFrame:
    """
    One row per visited state (initial state included); obj_* and held
    describe the block the instruction names.
    """
    rows = []
    for e, ep in enumerate(episodes):
        task = TASKS_BY_ID[ep.task_id]
        states = [ep.initial_state] + [r.state for r in ep.records]
        for s in states:
            target = s.objects[task.target_index]
            rows.append({
                'episode': e,
                'step': s.step,
                'gripper_x': s.gripper.x,
                'gripper_y': s.gripper.y,
                'grip': int(s.grip_closed),
                'obj_x': target.position.x,
                'obj_y': target.position.y,
                'held': int(target.held),
                'success': int(success(s, task)),
            })
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def write_traces_svg(episodes: Sequence[Episode], path) -> Path:
    """
    Executed gripper paths (solid) over each planned keypoint trajectory
    (dashed, markers). Output is byte-stable for identical episodes.
    """
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({'svg.hashsalt': 'latent-plan-vla', 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(5, 5))
        for e, ep in enumerate(episodes):
            colour = f"C{e % 10}"
            xy = ep.gripper_path().as_array()
            ax.plot(xy[:, 0], xy[:, 1], '-', color=colour, linewidth=1.2, label=f"episode {e}")
            for plan in ep.plans:
                if plan.trajectory is not None:
                    p = plan.trajectory.as_array()
                    ax.plot(p[:, 0], p[:, 1], '--o', color=colour, linewidth=0.6, markersize=2, alpha=0.7)
            goal = ep.initial_state.goal
            ax.add_patch(plt.Circle((goal.x, goal.y), ep.initial_state.goal_radius, fill=False, color=colour))
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_aspect('equal')
        ax.set_title('planned (dashed) vs executed (solid)')
        if episodes:
            ax.legend(loc='upper right', fontsize=6)
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
    return path
