"""Deterministic synthetic dynamic scenes used as a ground-truth oracle.

All randomness comes from numpy's Philox4x64-10 counter-based generator,
keyed by the scene seed with a fixed stream tag per purpose, so a config
and seed reproduce the same scene bit for bit:

    stream 0  static point positions
    stream 1  moving point initial positions and motion parameters
    stream 2  background texture
    stream 3  tracker pixel noise (further keyed by point id and start frame)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import FrameDims, quat_to_rotation, rotation_to_quat
from .tracking import BackendFailure, TrackQuery, TrackSet, Trajectory, sanitize_positions

NEAR = 0.05


class InfeasibleConfig(ValueError):
    pass


class UnmatchedSeed(BackendFailure):
    pass


def philox(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *stream])))


@dataclass
class SceneConfig:
    num_frames: int = 50
    n_static: int = 300
    n_moving: int = 0
    camera_path: str = "orbit"  # orbit | arc | linear
    radius: float = 0.5
    span_deg: float = 10.0  # swept angle for orbit and arc paths
    linear_length: float = 0.2  # path length for the linear path
    bob: float = 0.02  # vertical camera oscillation amplitude
    box: float = 0.3  # half extent of the point box around the orbit center
    motion_model: str = "linear"  # linear | sinusoidal | mixed
    motion_amplitude: float = 0.3
    pixel_noise: float = 0.0
    occlusions: list = field(default_factory=list)  # [(point, first_frame, last_frame)]
    width: int = 640
    height: int = 480
    focal: float = 460.0
    blob_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 2:
            raise InfeasibleConfig("need at least two frames")
        if not (self.radius > 0 and self.box > 0 and self.focal > 0 and self.blob_sigma > 0):
            raise InfeasibleConfig("radius, box, focal and blob_sigma must be positive")
        if self.width < 2 or self.height < 2:
            raise InfeasibleConfig("frames must be at least 2x2 pixels")
        if self.pixel_noise < 0:
            raise InfeasibleConfig("pixel noise must be >= 0")
        if self.camera_path not in ("orbit", "arc", "linear"):
            raise InfeasibleConfig(f"unknown camera path {self.camera_path!r}")
        if self.motion_model not in ("linear", "sinusoidal", "mixed"):
            raise InfeasibleConfig(f"unknown motion model {self.motion_model!r}")
        if self.n_static < 0 or self.n_moving < 0 or self.n_static + self.n_moving == 0:
            raise InfeasibleConfig("scene needs at least one point")
        self.occlusions = [tuple(int(v) for v in o) for o in self.occlusions]

    @property
    def dims(self) -> FrameDims:
        return FrameDims(self.width, self.height)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "occlusions":
                v = ";".join(f"{p},{a},{b}" for p, a, b in v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SceneConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in kinds:
                raise ValueError(f"line {lineno}: unknown scene key {k!r}")
            vals[k] = _parse_value(k, v, kinds[k])
        vals.update(overrides)
        return cls(**vals)

    @classmethod
    def from_file(cls, path, **overrides) -> "SceneConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(key, v, kind):
    if key == "occlusions":
        return [tuple(int(x) for x in item.split(",")) for item in v.split(";") if item.strip()]
    if kind == "int":
        return int(v)
    if kind == "float":
        return float(v)
    return v


def _look_at(center, target, down=(0.0, 1.0, 0.0)):
    """World-to-camera rotation for a camera at ``center`` looking at ``target``."""
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    y = np.asarray(down) - np.dot(down, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.stack([x, y, z])  # rows are camera axes in world coordinates


@dataclass
class SyntheticScene:
    config: SceneConfig
    quats: np.ndarray  # (N, 4) world-to-camera, unit, w >= 0
    trans: np.ndarray  # (N, 3)
    static_points: np.ndarray  # (n_static, 3)
    moving_points: np.ndarray  # (N, n_moving, 3)
    visibility: np.ndarray  # (N, n_points) bool
    projections: np.ndarray  # (N, n_points, 2)
    depths: np.ndarray  # (N, n_points)

    @property
    def num_frames(self) -> int:
        return self.config.num_frames

    @property
    def dims(self) -> FrameDims:
        return self.config.dims

    @property
    def focal(self) -> float:
        return self.config.focal

    @property
    def n_points(self) -> int:
        return self.visibility.shape[1]

    def is_moving(self, point_ids) -> np.ndarray:
        return np.asarray(point_ids) >= len(self.static_points)

    def points_at(self, frame: int) -> np.ndarray:
        return np.concatenate([self.static_points, self.moving_points[frame]], axis=0)

    def rotations(self) -> np.ndarray:
        return quat_to_rotation(self.quats)


def generate_scene(config: SceneConfig) -> SyntheticScene:
    cfg = config
    N = cfg.num_frames
    s = np.linspace(-0.5, 0.5, N)
    center = np.zeros(3)
    span = np.deg2rad(cfg.span_deg)
    bob = cfg.bob * np.sin(2 * np.pi * (s + 0.5))
    rots, trans = np.empty((N, 3, 3)), np.empty((N, 3))
    for i in range(N):
        if cfg.camera_path == "linear":
            C = np.array([cfg.linear_length * s[i], bob[i], -cfg.radius])
            R = np.eye(3)
        else:
            th = span * s[i]
            C = center + np.array([cfg.radius * np.sin(th), bob[i], -cfg.radius * np.cos(th)])
            if cfg.camera_path == "orbit":
                R = _look_at(C, center)
            else:
                # arc: pan only half as much as a look-at camera would
                R = _look_at(np.array([cfg.radius * np.sin(th / 2), 0.0, -cfg.radius * np.cos(th / 2)]), center)
        rots[i] = R
        trans[i] = -R @ C
    quats = rotation_to_quat(rots)

    b = cfg.box
    static = philox(cfg.seed, 0).uniform(-b, b, size=(cfg.n_static, 3))
    rng = philox(cfg.seed, 1)
    start = rng.uniform(-b, b, size=(cfg.n_moving, 3))
    dirs = rng.normal(size=(cfg.n_moving, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    phase = rng.uniform(0, 2 * np.pi, size=cfg.n_moving)
    kinds = {
        "linear": np.zeros(cfg.n_moving, bool),
        "sinusoidal": np.ones(cfg.n_moving, bool),
        "mixed": np.arange(cfg.n_moving) % 2 == 1,
    }[cfg.motion_model]
    u = (s + 0.5)[:, None]  # (N, 1) in [0, 1]
    lin = u * cfg.motion_amplitude
    sin = cfg.motion_amplitude * (np.sin(2 * np.pi * u + phase) - np.sin(phase))
    offset = np.where(kinds[None, :], sin, lin)  # (N, n_moving)
    moving = start[None] + offset[..., None] * dirs[None]

    n_pts = cfg.n_static + cfg.n_moving
    vis = np.zeros((N, n_pts), dtype=bool)
    proj = np.zeros((N, n_pts, 2))
    depth = np.zeros((N, n_pts))
    for i in range(N):
        pts = np.concatenate([static, moving[i]], axis=0)
        cam = pts @ rots[i].T + trans[i]
        z = cam[:, 2]
        zs = np.where(np.abs(z) > 1e-12, z, 1e-12)
        proj[i, :, 0] = cfg.focal * cam[:, 0] / zs + cfg.width / 2
        proj[i, :, 1] = cfg.focal * cam[:, 1] / zs + cfg.height / 2
        depth[i] = z
        inside = (proj[i, :, 0] >= 0) & (proj[i, :, 0] <= cfg.width - 1)
        inside &= (proj[i, :, 1] >= 0) & (proj[i, :, 1] <= cfg.height - 1)
        vis[i] = (z > NEAR) & inside
    for p, a, bnd in cfg.occlusions:
        if not 0 <= p < n_pts:
            raise InfeasibleConfig(f"occlusion refers to unknown point {p}")
        vis[max(a, 0) : min(bnd, N - 1) + 1, p] = False
    if not vis.any(axis=1).all():
        raise InfeasibleConfig("some frame sees none of the scene points")
    return SyntheticScene(cfg, quats, trans, static, moving, vis, proj, depth)


class SyntheticTracker:
    """Ground-truth tracker: snaps seeds to the nearest visible point and follows it."""

    snap_radius = 2.0

    def __init__(self, scene: SyntheticScene, pixel_noise: float | None = None, seed: int | None = None):
        self.scene = scene
        self.dims = scene.dims
        self.num_frames = scene.num_frames
        self.pixel_noise = scene.config.pixel_noise if pixel_noise is None else pixel_noise
        self.seed = scene.config.seed if seed is None else seed

    def track(self, query: TrackQuery, frames=None) -> TrackSet:
        query.validate(self.num_frames, self.dims)
        t = query.start_frame
        sc = self.scene
        visible = np.flatnonzero(sc.visibility[t])
        here = sc.projections[t, visible]
        out, unmatched = [], []
        for k, p in enumerate(query.positions):
            if len(visible) == 0:
                unmatched.append(k)
                continue
            d = np.linalg.norm(here - p, axis=1)
            j = int(np.argmin(d))
            if d[j] > self.snap_radius:
                unmatched.append(k)
                continue
            pid = int(visible[j])
            pos = sc.projections[t:, pid].copy()
            if self.pixel_noise > 0:
                pos += philox(self.seed, 3, pid, t).normal(0.0, self.pixel_noise, size=pos.shape)
            pos, vis = sanitize_positions(pos, sc.visibility[t:, pid], self.dims)
            out.append(Trajectory(k, t, pos, vis, source=pid))
        if unmatched:
            raise UnmatchedSeed(
                f"{len(unmatched)} seed(s) at frame {t} are not within {self.snap_radius}px of a visible point",
                unmatched,
            )
        return TrackSet(self.dims, self.num_frames, out)

    def full_tracks(self) -> TrackSet:
        """One track per scene point over the whole video (for track-file export)."""
        sc = self.scene
        out = []
        for pid in range(sc.n_points):
            pos = sc.projections[:, pid].copy()
            if self.pixel_noise > 0:
                pos += philox(self.seed, 3, pid, 0).normal(0.0, self.pixel_noise, size=pos.shape)
            pos, vis = sanitize_positions(pos, sc.visibility[:, pid], self.dims)
            out.append(Trajectory(pid, 0, pos, vis, source=pid))
        return TrackSet(self.dims, self.num_frames, out)


def synthetic_tracker(scene, pixel_noise=None, seed=None) -> SyntheticTracker:
    return SyntheticTracker(scene, pixel_noise, seed)


def _background(cfg: SceneConfig) -> np.ndarray:
    cell = 16
    gh, gw = cfg.height // cell + 2, cfg.width // cell + 2
    coarse = philox(cfg.seed, 2).uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(cfg.height) / cell
    xs = np.arange(cfg.width) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    top = c[y0][:, x0] * (1 - fx) + c[y0][:, x0 + 1] * fx
    bot = c[y0 + 1][:, x0] * (1 - fx) + c[y0 + 1][:, x0 + 1] * fx
    return 0.15 + 0.03 * (top * (1 - fy) + bot * fy)


def render_frames(scene: SyntheticScene, amplitude: float = 0.8) -> list[np.ndarray]:
    """Grayscale frames in [0, 1]: a Gaussian blob per visible point over a faint noise texture."""
    cfg = scene.config
    bg = _background(cfg)
    sig = cfg.blob_sigma
    r = int(np.ceil(4 * sig))
    frames = []
    for i in range(scene.num_frames):
        img = bg.copy()
        for pid in np.flatnonzero(scene.visibility[i]):
            x, y = scene.projections[i, pid]
            cx, cy = int(round(x)), int(round(y))
            x0, x1 = max(cx - r, 0), min(cx + r + 1, cfg.width)
            y0, y1 = max(cy - r, 0), min(cy + r + 1, cfg.height)
            gx = np.exp(-((np.arange(x0, x1) - x) ** 2) / (2 * sig * sig))
            gy = np.exp(-((np.arange(y0, y1) - y) ** 2) / (2 * sig * sig))
            img[y0:y1, x0:x1] += amplitude * gy[:, None] * gx[None, :]
        frames.append(np.clip(img, 0.0, 1.0))
    return frames


def gt_state(scene: SyntheticScene, sup):
    """Ground-truth ParameterState for a supervision set built on a static scene."""
    from .optim import ParameterState

    src = np.asarray(sup.sources)
    if np.any(src < 0) or np.any(scene.is_moving(src)):
        raise ValueError("ground-truth state needs static-point sources for every trajectory")
    return ParameterState(
        points=scene.static_points[src].copy(),
        focal=float(scene.focal),
        quats=scene.quats.copy(),
        trans=scene.trans.copy(),
        raw=np.ones(len(src)),
    )
