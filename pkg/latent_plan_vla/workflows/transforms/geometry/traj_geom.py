#####################################################################
## Trajectory geometry: keypoint simplification, DTW distance and
# start-frame subsampling. All functions are pure.
#####################################################################
from __future__ import annotations

import math
from typing import List, Tuple, Union

import numpy as np

from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import NUM_KEYPOINTS
from latent_plan_vla.schemas.trajectories.trajectory import Trajectory


def _segment_deviation(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Distance from p to segment ab; degenerate segments fall back to |p - a|."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return math.hypot(*(p - a))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    proj = a + t * ab
    return math.hypot(*(p - proj))


def rdp_to_k(raw: Trajectory, k: int) -> Trajectory:
    """
    Rank-based Ramer-Douglas-Peucker: simplify raw to exactly min(k, |raw|) points.

    Starting from the two endpoints, repeatedly insert the raw point with the
    largest deviation from the current piecewise-linear simplification until
    k points are kept. Ties go to the lowest raw index.

    Parameters
    ----------
    raw : Trajectory
        Dense path, at least 2 points.
    k : int
        Number of keypoints, at least 2.

    Returns
    -------
    Trajectory
        Selected points in their original order.
    """
    if len(raw) < 2:
        raise DomainError(f"rdp_to_k needs at least 2 points, got {len(raw)}")
    if k < 2:
        raise DomainError(f"rdp_to_k needs k >= 2, got {k}")
    n = len(raw)
    if n <= k:
        return raw

    xy = raw.as_array()
    keep = [0, n - 1]
    while len(keep) < k:
        best_dev, best_idx = -1.0, -1
        for left, right in zip(keep[:-1], keep[1:]):
            for i in range(left + 1, right):
                dev = _segment_deviation(xy[i], xy[left], xy[right])
                if dev > best_dev or (dev == best_dev and i < best_idx):
                    best_dev, best_idx = dev, i
        keep.append(best_idx)
        keep.sort()
    return Trajectory(tuple(raw.points[i] for i in keep))


def keypoints(raw: Trajectory, k: int = NUM_KEYPOINTS) -> Trajectory:
    """
    rdp_to_k, then pad by repeating the final point so exactly k points come back.
    A single-point path is duplicated first.
    """
    if len(raw) == 1:
        raw = Trajectory((raw.points[0], raw.points[0]))
    simplified = rdp_to_k(raw, k)
    pts = list(simplified.points)
    while len(pts) < k:
        pts.append(pts[-1])
    return Trajectory(tuple(pts))


def _cost_matrix(a: Trajectory, b: Trajectory) -> np.ndarray:
    xa, xb = a.as_array(), b.as_array()
    diff = xa[:, None, :] - xb[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def dtw_alignment(a: Trajectory, b: Trajectory) -> Tuple[float, int]:
    """
    Minimum accumulated Euclidean cost over monotone alignments and the length
    of the warping path achieving it (shortest path on cost ties).
    """
    if len(a) == 0 or len(b) == 0:
        raise DomainError("dtw_distance needs non-empty trajectories")
    cost = _cost_matrix(a, b)
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    steps = np.zeros((n, m), dtype=np.int64)
    acc[0, 0] = cost[0, 0]
    steps[0, 0] = 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = (math.inf, 0)
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                cand = (acc[pi, pj], steps[pi, pj])
                if cand < best:
                    best = cand
            acc[i, j] = cost[i, j] + best[0]
            steps[i, j] = best[1] + 1
    return float(acc[-1, -1]), int(steps[-1, -1])


def dtw_distance(a: Trajectory, b: Trajectory) -> float:
    """
    Length-normalised DTW: optimal accumulated cost divided by the warping-path
    length, so the value stays in [0, sqrt(2)] on the unit square.
    """
    total, length = dtw_alignment(a, b)
    return total / length


def subsample_starts(demo: Union[Trajectory, int], n: int, rng_seed, k: int = NUM_KEYPOINTS) -> List[int]:
    """
    Draw n distinct start frames, each leaving at least k frames (itself included)
    before the end of the demo.

    Args:
        demo: dense demo trajectory, or its frame count.
        n: number of starts.
        rng_seed: seed for np.random.default_rng.
        k: keypoint count the starts must leave room for.

    Returns:
        Sorted list of start indices.
    """
    length = demo if isinstance(demo, int) else len(demo)
    if n < 1:
        raise DomainError(f"n must be positive, got {n}")
    candidates = length - k + 1
    if length <= n or candidates < n:
        raise DomainError(f"demo of {length} frames is too short for {n} starts with k={k}")
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(candidates, size=n, replace=False)
    return sorted(int(i) for i in picks)
