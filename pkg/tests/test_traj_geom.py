import itertools
import math

import numpy as np
import pytest

from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.trajectories.trajectory import Trajectory
from latent_plan_vla.workflows.transforms.geometry.traj_geom import (
    dtw_alignment, dtw_distance, keypoints, rdp_to_k, subsample_starts,
)


def _brute_force_dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum accumulated cost over every monotone warping path."""
    n, m = len(a), len(b)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += math.hypot(*(a[i] - b[j]))
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def test_rdp_collinear_keeps_endpoints():
    raw = Trajectory.from_xy([(0.1 * i, 0.1 * i) for i in range(6)])
    out = rdp_to_k(raw, 2)
    assert [p.as_tuple() for p in out] == [(0.0, 0.0), (0.5, 0.5)]


def test_rdp_peak():
    raw = Trajectory.from_xy([(0, 0), (0.5, 1), (1, 0)])
    assert len(rdp_to_k(raw, 3)) == 3
    assert [p.as_tuple() for p in rdp_to_k(raw, 2)] == [(0.0, 0.0), (1.0, 0.0)]


def test_rdp_picks_largest_deviation_first():
    raw = Trajectory.from_xy([(0, 0), (0.2, 0.1), (0.4, 0.6), (0.6, 0.1), (1, 0)])
    out = rdp_to_k(raw, 3)
    assert out[1].as_tuple() == (0.4, 0.6)


def test_rdp_short_input_unchanged():
    raw = Trajectory.from_xy([(0.1, 0.2), (0.3, 0.4)])
    assert rdp_to_k(raw, 8) == raw


def test_rdp_idempotent():
    rng = np.random.default_rng(3)
    raw = Trajectory.from_xy(rng.random((30, 2)))
    once = rdp_to_k(raw, 8)
    assert rdp_to_k(once, 8) == once


def test_rdp_rejects_bad_input():
    with pytest.raises(DomainError):
        rdp_to_k(Trajectory.from_xy([(0.5, 0.5)]), 2)
    with pytest.raises(DomainError):
        rdp_to_k(Trajectory.from_xy([(0, 0), (1, 1)]), 1)


def test_keypoints_pads_to_k():
    out = keypoints(Trajectory.from_xy([(0.2, 0.2), (0.4, 0.4)]), 8)
    assert len(out) == 8
    assert all(p.as_tuple() == (0.4, 0.4) for p in out.points[1:])
    assert len(keypoints(Trajectory.from_xy([(0.3, 0.3)]), 8)) == 8


def test_dtw_single_points():
    a = Trajectory.from_xy([(0, 0)])
    b = Trajectory.from_xy([(0.3, 0.4)])
    assert dtw_distance(a, b) == pytest.approx(0.5)


def test_dtw_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = Trajectory.from_xy(rng.random((6, 2)))
    b = Trajectory.from_xy(rng.random((4, 2)))
    assert dtw_distance(a, a) == 0.0
    assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), abs=1e-12)


def test_dtw_bounded_on_unit_square():
    a = Trajectory.from_xy([(0, 0), (0, 0)])
    b = Trajectory.from_xy([(1, 1), (1, 1), (1, 1)])
    assert dtw_distance(a, b) == pytest.approx(math.sqrt(2))


def test_dtw_matches_brute_force():
    rng = np.random.default_rng(11)
    for n, m in itertools.product(range(1, 5), repeat=2):
        a = rng.random((n, 2))
        b = rng.random((m, 2))
        total, length = dtw_alignment(Trajectory.from_xy(a), Trajectory.from_xy(b))
        assert total == pytest.approx(_brute_force_dtw(a, b), abs=1e-12)
        assert max(n, m) <= length <= n + m - 1


def test_dtw_rejects_empty():
    with pytest.raises(DomainError):
        Trajectory(())


def test_subsample_starts_deterministic_and_in_range():
    first = subsample_starts(100, 10, 7, k=8)
    assert first == subsample_starts(100, 10, 7, k=8)
    assert first == sorted(set(first))
    assert all(0 <= i <= 92 for i in first)


def test_subsample_starts_boundary():
    # k + 1 frames leave exactly two candidate starts
    assert subsample_starts(9, 1, 0, k=8)[0] in (0, 1)
    with pytest.raises(DomainError):
        subsample_starts(9, 3, 0, k=8)
    with pytest.raises(DomainError):
        subsample_starts(5, 1, 0, k=8)
