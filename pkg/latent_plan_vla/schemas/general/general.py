from enum import Enum

# ---------- Trajectories ----------
NUM_KEYPOINTS = 8
COORD_DECIMALS = 3
COORD_BINS = 64

# ---------- Simulator ----------
GRASP_RADIUS = 0.05
MAX_STEP = 0.05
GOAL_RADIUS = 0.08
MIN_OBJECT_GOAL_SEPARATION = 0.2
DEFAULT_HORIZON = 120
MAX_OBJECTS = 2
OBJECT_FEATURES = 4  # x, y, held, present
STATE_FEATURE_DIM = 3 + MAX_OBJECTS * OBJECT_FEATURES + 3

# ---------- Action chunks ----------
ACTION_DIM = 3
CHUNK_HORIZON = 8

# ---------- Diffusion ----------
DIFFUSION_TRAIN_STEPS = 1000
DIFFUSION_INFER_STEPS = 20
BETA_START = 1e-4
BETA_END = 2e-2


class PayloadKind(Enum):
    INVALID = 0
    TRAJECTORY = 1
    CHOICE = 2


class TaskKind(Enum):
    PICK_PLACE = 1
    CHOICE = 2


OPTION_LETTERS = ('A', 'B', 'C', 'D')

# colour words double as object names in prompts and instructions
OBJECT_COLOURS = ('red', 'blue')
