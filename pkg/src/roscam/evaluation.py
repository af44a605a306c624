"""Trajectory alignment, ATE / RPE metrics and the pose text format.

Poses at this module's interface are camera-to-world: rotation ``R`` maps
camera axes to world axes and ``position`` is the camera center. The
optimizer works in world-to-camera form; :func:`from_world_to_camera`
converts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import quat_to_rotation, rotation_to_quat


class DegenerateAlignment(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class TrajectoryEstimate:
    rotations: np.ndarray  # (N, 3, 3) camera-to-world
    positions: np.ndarray  # (N, 3) camera centers
    focal: float | None = None
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.rotations) != len(self.positions):
            raise LengthMismatch("rotations and positions differ in length")
        if len(self.positions) < 2:
            raise ValueError("a trajectory needs at least two poses")
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.positions), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.positions)

    def matrices(self) -> np.ndarray:
        T = np.tile(np.eye(4), (len(self), 1, 1))
        T[:, :3, :3] = self.rotations
        T[:, :3, 3] = self.positions
        return T

    def transformed(self, al: "AlignmentResult") -> "TrajectoryEstimate":
        """Apply x -> s R x + d to the whole trajectory (orientations rotate by R)."""
        return TrajectoryEstimate(
            al.rotation @ self.rotations,
            al.scale * self.positions @ al.rotation.T + al.offset,
            self.focal,
            self.timestamps,
        )


def from_world_to_camera(quats, trans, focal=None) -> TrajectoryEstimate:
    R = quat_to_rotation(quats)
    Rt = np.swapaxes(R, -1, -2)
    centers = -np.einsum("nij,nj->ni", Rt, np.asarray(trans, dtype=np.float64))
    return TrajectoryEstimate(Rt, centers, focal)


def to_world_to_camera(traj: TrajectoryEstimate):
    R = np.swapaxes(traj.rotations, -1, -2)
    t = -np.einsum("nij,nj->ni", R, traj.positions)
    return rotation_to_quat(R), t


@dataclass
class AlignmentResult:
    rotation: np.ndarray
    scale: float
    offset: np.ndarray
    mode: str  # sim3 | se3 | none

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.offset


def umeyama_align(est, gt, with_scale: bool = True) -> AlignmentResult:
    """Closed-form (s, R, d) minimizing sum ||s R est + d - gt||^2."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} reference positions")
    if len(est) < 3:
        raise DegenerateAlignment("alignment needs at least three positions")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    de, dg = est - mu_e, gt - mu_g
    sv = np.linalg.svd(de, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateAlignment("positions are collinear; rotation about the line is undetermined")
    cov = dg.T @ de / len(est)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_e = (de**2).sum() / len(est)
        s = float(np.trace(np.diag(D) @ S) / var_e)
    else:
        s = 1.0
    d = mu_g - s * R @ mu_e
    return AlignmentResult(R, s, d, "sim3" if with_scale else "se3")


def align(est: TrajectoryEstimate, gt: TrajectoryEstimate, mode: str = "sim3") -> AlignmentResult:
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} reference poses")
    if mode == "none":
        return AlignmentResult(np.eye(3), 1.0, np.zeros(3), "none")
    if mode not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    return umeyama_align(est.positions, gt.positions, with_scale=mode == "sim3")


def ate(est: TrajectoryEstimate, gt: TrajectoryEstimate, mode: str = "sim3") -> float:
    """RMSE of camera-center error after aligning ``est`` onto ``gt``."""
    al = align(est, gt, mode)
    err = al.apply(est.positions) - gt.positions
    return float(np.sqrt((err**2).sum(axis=1).mean()))


def rotation_angle_deg(R) -> np.ndarray:
    """Rotation angle of R in degrees; atan2 keeps small angles accurate where arccos would not."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    axis = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = np.linalg.norm(axis, axis=-1) / 2.0
    return np.degrees(np.arctan2(s, c))


def rpe(est: TrajectoryEstimate, gt: TrajectoryEstimate, delta: int = 1) -> tuple[float, float]:
    """(translation RMSE, rotation RMSE in degrees) of relative-pose discrepancies at frame gap ``delta``."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} reference poses")
    if not 1 <= delta < len(est):
        raise ValueError(f"delta must be in [1, {len(est) - 1}]")
    Te, Tg = est.matrices(), gt.matrices()
    rel_e = np.linalg.inv(Te[:-delta]) @ Te[delta:]
    rel_g = np.linalg.inv(Tg[:-delta]) @ Tg[delta:]
    E = np.linalg.inv(rel_g) @ rel_e
    trans = np.linalg.norm(E[:, :3, 3], axis=1)
    rot = rotation_angle_deg(E[:, :3, :3])
    return float(np.sqrt((trans**2).mean())), float(np.sqrt((rot**2).mean()))


def write_poses(traj: TrajectoryEstimate, path) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line, focal on a ``# focal`` comment."""
    q = rotation_to_quat(traj.rotations)  # w, x, y, z
    lines = []
    if traj.focal is not None:
        lines.append(f"# focal {float(traj.focal)!r}")
    for ts, p, qq in zip(traj.timestamps, traj.positions, q):
        vals = [ts, *p, qq[1], qq[2], qq[3], qq[0]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> TrajectoryEstimate:
    focal = None
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            tok = s[1:].split()
            if len(tok) == 2 and tok[0] == "focal":
                focal = float(tok[1])
            continue
        vals = s.split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 values, got {len(vals)}")
        rows.append([float(v) for v in vals])
    if not rows:
        raise ValueError(f"{path}: no poses")
    a = np.array(rows)
    q = a[:, [7, 4, 5, 6]]  # to w, x, y, z
    return TrajectoryEstimate(quat_to_rotation(q), a[:, 1:4], focal, a[:, 0])
