import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roscam.core import quat_to_rotation
from roscam.evaluation import (
    DegenerateAlignment,
    LengthMismatch,
    TrajectoryEstimate,
    align,
    ate,
    from_world_to_camera,
    read_poses,
    rotation_angle_deg,
    rpe,
    to_world_to_camera,
    umeyama_align,
    write_poses,
)


def rz(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def random_traj(r, n=30):
    rots = quat_to_rotation(r.normal(size=(n, 4)))
    pos = np.cumsum(r.normal(size=(n, 3)), axis=0)
    return TrajectoryEstimate(rots, pos)


def similarity(r):
    return 10 ** r.uniform(-1, 1), quat_to_rotation(r.normal(size=4)), r.normal(size=3) * 5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_generate_then_recover(seed):
    r = np.random.default_rng(seed)
    gt = random_traj(r)
    s, R, d = similarity(r)
    # est is gt seen through the inverse similarity; alignment must undo it exactly
    est = TrajectoryEstimate(R.T @ gt.rotations, ((gt.positions - d) @ R) / s)
    al = umeyama_align(est.positions, gt.positions)
    assert al.scale == pytest.approx(s, rel=1e-9)
    np.testing.assert_allclose(al.rotation, R, atol=1e-9)
    np.testing.assert_allclose(al.offset, d, atol=1e-9 * max(1.0, np.abs(d).max()))
    assert ate(est, gt) < 1e-9
    rt, rr = rpe(est.transformed(al), gt)
    assert rt < 1e-9 and rr < 1e-6


def test_ate_of_identical_trajectories_is_zero(rng):
    gt = random_traj(rng)
    for mode in ("sim3", "se3", "none"):
        assert ate(gt, gt, mode) == pytest.approx(0.0, abs=1e-12)
    rt, rr = rpe(gt, gt)
    assert rt == pytest.approx(0.0, abs=1e-12) and rr == pytest.approx(0.0, abs=1e-12)


def test_ate_is_sim3_invariant(rng):
    gt = random_traj(rng)
    est = TrajectoryEstimate(gt.rotations, gt.positions + rng.normal(0, 0.3, size=gt.positions.shape))
    base = ate(est, gt)
    assert base > 0
    for _ in range(5):
        s, R, d = similarity(rng)
        moved = TrajectoryEstimate(R @ est.rotations, s * est.positions @ R.T + d)
        assert ate(moved, gt) == pytest.approx(base, rel=1e-9)


def test_ate_known_value_without_alignment():
    gt = TrajectoryEstimate(np.tile(np.eye(3), (4, 1, 1)), np.zeros((4, 3)))
    est = TrajectoryEstimate(gt.rotations, [[1, 0, 0], [0, 2, 0], [0, 0, 2], [0, 0, 0]])
    assert ate(est, gt, "none") == pytest.approx(np.sqrt(9 / 4))


def test_se3_does_not_absorb_scale(rng):
    gt = random_traj(rng)
    scaled = TrajectoryEstimate(gt.rotations, 2.0 * gt.positions)
    assert ate(scaled, gt, "sim3") < 1e-9
    assert ate(scaled, gt, "se3") > 0.1


def test_rpe_one_degree_per_frame():
    n = 20
    gt = TrajectoryEstimate(np.tile(np.eye(3), (n, 1, 1)), np.c_[np.arange(n), np.zeros((n, 2))])
    est = TrajectoryEstimate(np.stack([rz(i) for i in range(n)]), gt.positions)
    assert rpe(est, gt)[1] == pytest.approx(1.0, rel=1e-9)
    assert rpe(est, gt, delta=3)[1] == pytest.approx(3.0, rel=1e-9)


def test_rpe_single_jump():
    n, k, delta = 25, 11, 0.4
    rots = np.tile(np.eye(3), (n, 1, 1))
    gt = TrajectoryEstimate(rots, np.c_[np.arange(n), np.zeros((n, 2))])
    pos = gt.positions.copy()
    pos[k + 1 :, 1] += delta
    est = TrajectoryEstimate(rots, pos)
    rt, rr = rpe(est, gt)
    assert rt == pytest.approx(delta / np.sqrt(n - 1), rel=1e-12)
    assert rr == 0.0


def test_rotation_angle_small_and_large():
    np.testing.assert_allclose(rotation_angle_deg(np.stack([rz(1e-7), rz(90), rz(179.9)])), [1e-7, 90, 179.9],
                               rtol=1e-9)


def test_degenerate_alignment():
    line = np.c_[np.arange(5.0), np.zeros((5, 2))]
    with pytest.raises(DegenerateAlignment):
        umeyama_align(line, line)
    with pytest.raises(DegenerateAlignment):
        umeyama_align(line[:2], line[:2])


def test_length_mismatch(rng):
    a, b = random_traj(rng, 10), random_traj(rng, 12)
    with pytest.raises(LengthMismatch):
        ate(a, b)
    with pytest.raises(LengthMismatch):
        rpe(a, b)


def test_align_none_is_identity(rng):
    t = random_traj(rng)
    al = align(t, t, "none")
    np.testing.assert_array_equal(al.apply(t.positions), t.positions)


def test_world_to_camera_conversion_round_trip(rng):
    q = rng.normal(size=(8, 4))
    t = rng.normal(size=(8, 3))
    traj = from_world_to_camera(q, t)
    R = quat_to_rotation(q)
    # camera center maps to the camera origin
    np.testing.assert_allclose(np.einsum("nij,nj->ni", R, traj.positions) + t, 0.0, atol=1e-12)
    q2, t2 = to_world_to_camera(traj)
    np.testing.assert_allclose(quat_to_rotation(q2), R, atol=1e-12)
    np.testing.assert_allclose(t2, t, atol=1e-12)


def test_pose_file_round_trip(tmp_path, rng):
    traj = random_traj(rng)
    traj.focal = 512.25
    p = tmp_path / "poses.txt"
    write_poses(traj, p)
    back = read_poses(p)
    assert back.focal == 512.25
    np.testing.assert_array_equal(back.positions, traj.positions)
    np.testing.assert_allclose(back.rotations, traj.rotations, atol=1e-12)
    line = p.read_text().splitlines()[1].split()
    assert len(line) == 8 and float(line[0]) == 0.0


def test_pose_file_rejects_bad_rows(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("0 1 2 3\n")
    with pytest.raises(ValueError):
        read_poses(p)


def test_umeyama_reference_cases(rng):
    pts = rng.normal(size=(20, 3))
    al = umeyama_align(pts, pts)
    np.testing.assert_allclose(al.rotation, np.eye(3), atol=1e-12)
    assert al.scale == pytest.approx(1.0)
    np.testing.assert_allclose(al.offset, 0.0, atol=1e-12)
    assert umeyama_align(0.5 * pts, pts).scale == pytest.approx(2.0)


def test_constant_offset_absorbed_by_se3(rng):
    gt = random_traj(rng)
    est = TrajectoryEstimate(gt.rotations, gt.positions + [1.0, -2.0, 0.5])
    assert ate(est, gt, "se3") < 1e-12


def test_single_displaced_frame_without_alignment(rng):
    gt = random_traj(rng, 16)
    pos = gt.positions.copy()
    pos[5] += [0.0, 0.3, 0.4]
    est = TrajectoryEstimate(gt.rotations, pos)
    assert ate(est, gt, "none") == pytest.approx(0.5 / np.sqrt(16), rel=1e-12)


def test_rpe_matches_per_pair_composition(rng):
    gt = random_traj(rng, 15)
    est = TrajectoryEstimate(quat_to_rotation(rng.normal(size=(15, 4))), gt.positions + rng.normal(0, 0.1, (15, 3)))

    def mat(t, i):
        M = np.eye(4)
        M[:3, :3], M[:3, 3] = t.rotations[i], t.positions[i]
        return M

    for delta in (1, 4):
        tr, rot = [], []
        for i in range(15 - delta):
            rel_g = np.linalg.inv(mat(gt, i)) @ mat(gt, i + delta)
            rel_e = np.linalg.inv(mat(est, i)) @ mat(est, i + delta)
            E = np.linalg.inv(rel_g) @ rel_e
            tr.append(np.linalg.norm(E[:3, 3]))
            c = np.clip((np.trace(E[:3, :3]) - 1) / 2, -1, 1)
            rot.append(np.degrees(np.arccos(c)))
        want = np.sqrt(np.mean(np.square(tr))), np.sqrt(np.mean(np.square(rot)))
        np.testing.assert_allclose(rpe(est, gt, delta), want, rtol=1e-10)
