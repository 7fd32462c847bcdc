import re
from typing import List, Optional, Tuple

from latent_plan_vla.schemas.general.general import COORD_DECIMALS, OPTION_LETTERS
from latent_plan_vla.schemas.trajectories.trajectory import Trajectory

_NUM = r'[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?'
_POINT = rf'\(\s*({_NUM})\s*,\s*({_NUM})\s*\)'
POINT_RE = re.compile(_POINT)
TRAJECTORY_RE = re.compile(rf'\[\s*(?:{_POINT}\s*(?:,\s*{_POINT}\s*)*)?\]')

# exactly one think block then exactly one answer block; no tags nested inside either
_NO_TAG = r'(?:(?!</?think>|</?answer>).)*'
RESPONSE_RE = re.compile(rf'<think>({_NO_TAG})</think>\s*<answer>({_NO_TAG})</answer>', re.DOTALL)


def format_coord(v: float) -> str:
    return f"{v:.{COORD_DECIMALS}f}"


def render_trajectory(traj: Trajectory) -> str:
    """
    Text form used in planner answers and trace exports:
    [(x1,y1),(x2,y2),...] with 3 decimals.
    """
    return '[' + ','.join(f"({format_coord(p.x)},{format_coord(p.y)})" for p in traj.points) + ']'


def parse_trajectory_text(payload: str) -> Optional[List[Tuple[float, float]]]:
    """
    Parse a trajectory payload. Returns the raw (x, y) pairs, unvalidated
    against range or arity, or None when the text is not a point list.
    """
    payload = payload.strip()
    if not TRAJECTORY_RE.fullmatch(payload):
        return None
    return [(float(x), float(y)) for x, y in POINT_RE.findall(payload)]


def parse_option_text(payload: str) -> Optional[str]:
    letter = payload.strip().upper()
    return letter if letter in OPTION_LETTERS else None


def split_response(text: str) -> Optional[Tuple[str, str]]:
    """(reasoning, answer payload) when text follows the response grammar, else None."""
    m = RESPONSE_RE.fullmatch(text)
    if m is None:
        return None
    return m.group(1), m.group(2)


def render_response(reasoning: str, payload: str) -> str:
    return f"<think>{reasoning}</think> <answer>{payload}</answer>"
