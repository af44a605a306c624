"""Point-tracker interface, the track-file backend and the TRACKS v1 format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import FrameDims


class BackendFailure(RuntimeError):
    """A tracker backend could not serve a query.

    ``unmatched`` lists the query rows the backend had no track for, so a
    caller can drop those seeds and retry with the rest.
    """

    def __init__(self, message: str, unmatched: Sequence[int] | None = None):
        super().__init__(message)
        self.unmatched = list(unmatched) if unmatched is not None else None


@dataclass
class TrackQuery:
    start_frame: int
    positions: np.ndarray  # (M, 2) pixel (x, y)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)

    def validate(self, num_frames: int, dims: FrameDims) -> None:
        if not 0 <= self.start_frame < num_frames:
            raise ValueError(f"start frame {self.start_frame} outside [0, {num_frames})")
        x, y = self.positions[:, 0], self.positions[:, 1]
        if np.any((x < 0) | (x > dims.width) | (y < 0) | (y > dims.height)):
            raise ValueError("query positions must lie inside the frame")


@dataclass
class Trajectory:
    id: int
    start: int
    positions: np.ndarray  # (L, 2)
    visibility: np.ndarray  # (L,) bool
    source: int | None = field(default=None, compare=False)  # synthetic ground-truth point

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if len(self.positions) != len(self.visibility) or len(self.positions) == 0:
            raise ValueError("positions and visibility must be non-empty and equally long")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"trajectory {self.id} has non-finite positions")

    @property
    def end(self) -> int:
        return self.start + len(self.positions) - 1

    def covers(self, frame: int) -> bool:
        return self.start <= frame <= self.end

    def at(self, frame: int) -> np.ndarray:
        return self.positions[frame - self.start]

    def truncated(self, end: int) -> "Trajectory":
        n = end - self.start + 1
        return Trajectory(self.id, self.start, self.positions[:n], self.visibility[:n], self.source)

    def same_as(self, other: "Trajectory") -> bool:
        return (
            self.id == other.id
            and self.start == other.start
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.visibility, other.visibility)
        )


@dataclass
class TrackSet:
    dims: FrameDims
    num_frames: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        for tr in self.trajectories:
            if tr.start < 0 or tr.end >= self.num_frames:
                raise ValueError(f"trajectory {tr.id} spans [{tr.start}, {tr.end}] outside the video")

    def __len__(self) -> int:
        return len(self.trajectories)

    def with_trajectories(self, trajectories) -> "TrackSet":
        return TrackSet(self.dims, self.num_frames, list(trajectories))

    def same_as(self, other: "TrackSet") -> bool:
        return (
            self.dims == other.dims
            and self.num_frames == other.num_frames
            and len(self) == len(other)
            and all(a.same_as(b) for a, b in zip(self.trajectories, other.trajectories))
        )


class Tracker(Protocol):
    dims: FrameDims
    num_frames: int

    def track(self, query: TrackQuery, frames=None) -> TrackSet: ...


def sanitize_positions(positions, visibility, dims: FrameDims):
    """Clamp tracks into [-W, 2W] x [-H, 2H], marking clamped or out-of-frame samples invisible."""
    pos = np.array(positions, dtype=np.float64)
    vis = np.array(visibility, dtype=bool)
    W, H = dims.width, dims.height
    bad = ~np.isfinite(pos).all(axis=1)
    pos[bad] = 0.0
    lo, hi = np.array([-W, -H]), np.array([2 * W, 2 * H])
    clamped = ((pos < lo) | (pos > hi)).any(axis=1) | bad
    pos = np.clip(pos, lo, hi)
    outside = (pos[:, 0] < 0) | (pos[:, 0] > W - 1) | (pos[:, 1] < 0) | (pos[:, 1] > H - 1)
    vis &= ~(clamped | outside)
    return pos, vis


class FileTracker:
    """Serves queries from a precomputed TrackSet (e.g. exported from a neural tracker).

    A seed matches the nearest stored trajectory that is visible at the seed
    frame within ``radius`` pixels; the returned track is that trajectory from
    the seed frame onward.
    """

    def __init__(self, tracks: TrackSet, radius: float = 0.5):
        self.tracks = tracks
        self.dims = tracks.dims
        self.num_frames = tracks.num_frames
        self.radius = radius

    @classmethod
    def from_file(cls, path, radius: float = 0.5) -> "FileTracker":
        return cls(read_tracks(path), radius=radius)

    def track(self, query: TrackQuery, frames=None) -> TrackSet:
        query.validate(self.num_frames, self.dims)
        t = query.start_frame
        alive = [tr for tr in self.tracks.trajectories if tr.covers(t) and tr.visibility[t - tr.start]]
        out, unmatched = [], []
        if alive:
            here = np.array([tr.at(t) for tr in alive])
        for k, p in enumerate(query.positions):
            if not alive:
                unmatched.append(k)
                continue
            d = np.linalg.norm(here - p, axis=1)
            j = int(np.argmin(d))
            if d[j] > self.radius:
                unmatched.append(k)
                continue
            src = alive[j]
            off = t - src.start
            pos, vis = sanitize_positions(src.positions[off:], src.visibility[off:], self.dims)
            out.append(Trajectory(k, t, pos, vis, source=src.id if src.source is None else src.source))
        if unmatched:
            raise BackendFailure(
                f"track file has no trajectory within {self.radius}px for {len(unmatched)} seed(s) at frame {t}",
                unmatched,
            )
        return TrackSet(self.dims, self.num_frames, out)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tracks(tracks: TrackSet, path) -> None:
    lines = [f"TRACKS v1 {tracks.num_frames} {tracks.dims.width} {tracks.dims.height}"]
    for tr in tracks.trajectories:
        parts = [str(tr.id), str(tr.start)]
        for (x, y), v in zip(tr.positions, tr.visibility):
            parts += [_fmt(x), _fmt(y), "1" if v else "0"]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path) -> TrackSet:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty track file")
    head = text[0].split()
    if len(head) != 5 or head[:2] != ["TRACKS", "v1"]:
        raise ValueError(f"{path}: bad header {text[0]!r}")
    n, W, H = int(head[2]), int(head[3]), int(head[4])
    trajs = []
    for lineno, line in enumerate(text[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if (len(tok) - 2) % 3 or len(tok) < 5:
            raise ValueError(f"{path}:{lineno}: expected 'id start [x y v]*'")
        body = tok[2:]
        xs = np.array([float(v) for v in body[0::3]])
        ys = np.array([float(v) for v in body[1::3]])
        vis = np.array([v == "1" for v in body[2::3]])
        trajs.append(Trajectory(int(tok[0]), int(tok[1]), np.stack([xs, ys], axis=1), vis))
    return TrackSet(FrameDims(W, H), n, trajs)
