"""Geometry primitives: quaternions, pinhole intrinsics, projection, softplus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_DIV = 1e-8
EPS_NORM = 1e-12


class DegenerateQuaternion(ValueError):
    pass


@dataclass(frozen=True)
class FrameDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame dims must be positive, got {self.width}x{self.height}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


@dataclass
class ProjectionResult:
    pixels: np.ndarray  # (B, 2); NaN where invalid
    depth: np.ndarray  # (B,)
    valid: np.ndarray  # (B,) bool, |depth| > EPS_DIV


def softplus(raw):
    """log(1 + e^raw), overflow safe for any finite input."""
    return np.logaddexp(0.0, raw)


def sigmoid(x):
    # derivative of softplus
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= EPS_NORM):
        raise DegenerateQuaternion(f"quaternion norm {n.min():.3g} <= {EPS_NORM}")
    return q / n


def _unit_quat_to_rotation(qh):
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    R = np.empty(qh.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotation(q):
    """Rotation matrix of a (w, x, y, z) quaternion, normalized first.

    Accepts a single quaternion of shape (4,) or a batch (..., 4).
    """
    return _unit_quat_to_rotation(normalize_quat(q))


def unit_quat_rotation_jacobian(qh):
    """dR/dq for unit quaternions, shape (..., 4, 3, 3) ordered (w, x, y, z)."""
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    zero = np.zeros_like(w)
    rows = lambda *r: np.stack([np.stack(a, axis=-1) for a in r], axis=-2)  # noqa: E731
    dw = rows((zero, -z, y), (z, zero, -x), (-y, x, zero))
    dx = rows((zero, y, z), (y, -2 * x, -w), (z, w, -2 * x))
    dy = rows((-2 * y, x, w), (x, zero, z), (-w, z, -2 * y))
    dz = rows((-2 * z, -w, x), (w, -2 * z, y), (x, y, zero))
    return 2.0 * np.stack([dw, dx, dy, dz], axis=-3)


def rotation_to_quat(R):
    """Unit (w, x, y, z) quaternion with w >= 0 for a rotation matrix (..., 3, 3)."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, M in enumerate(flat):
        tr = np.trace(M)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif M[1, 1] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[k] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def intrinsics(f: float, dims: FrameDims) -> np.ndarray:
    """4x4 projection matrix whose 4th output component is camera depth."""
    if not f > 0:
        raise ValueError(f"focal length must be positive, got {f}")
    return np.array(
        [
            [f, 0.0, dims.cx, 0.0],
            [0.0, f, dims.cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )


def project(points, q, t, f: float, dims: FrameDims) -> ProjectionResult:
    """Project world points through a world-to-camera pose (q, t) and focal f."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    R = quat_to_rotation(q)
    cam = points @ R.T + np.asarray(t, dtype=np.float64)
    z = cam[:, 2]
    valid = np.abs(z) > EPS_DIV
    safe_z = np.where(valid, z, 1.0)
    pix = np.empty((len(points), 2))
    pix[:, 0] = f * cam[:, 0] / safe_z + dims.cx
    pix[:, 1] = f * cam[:, 1] / safe_z + dims.cy
    pix[~valid] = np.nan
    return ProjectionResult(pixels=pix, depth=z, valid=valid)


def world_to_camera_to_c2w(R, t):
    """Invert world-to-camera (R, t) into camera-to-world rotation and center."""
    R = np.asarray(R)
    Rt = np.swapaxes(R, -1, -2)
    center = -np.einsum("...ij,...j->...i", Rt, np.asarray(t))
    return Rt, center
