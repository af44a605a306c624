"""Patch-wise tracking filters and the budgeted re-seeding loop.

Frames are grayscale float arrays indexed ``[row, col]``. Pixel positions are
``(x, y) = (col, row)``; a tracked sub-pixel position belongs to the patch of
its nearest pixel.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FrameDims
from .tracking import BackendFailure, Tracker, TrackQuery, TrackSet, Trajectory

log = logging.getLogger(__name__)


class FrameTooSmall(ValueError):
    pass


class InsufficientTexture(RuntimeError):
    pass


class NonTermination(RuntimeError):
    pass


def default_patch_size(width: int) -> int:
    return 12 if width <= 854 else 24


def to_grayscale(image) -> np.ndarray:
    """Luma in [0, 1] from an 8-bit or float image, grayscale or RGB(A)."""
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img


@dataclass
class TextureMap:
    marked: np.ndarray  # (rows // w, cols // w) bool
    variance: np.ndarray
    w: int
    tau_var: float


def _patch_view(img, w):
    gh, gw = img.shape[0] // w, img.shape[1] // w
    crop = img[: gh * w, : gw * w]
    return crop.reshape(gh, w, gw, w).transpose(0, 2, 1, 3).reshape(gh, gw, w * w)


def texture_map(frame, w: int, tau_var: float = 0.1) -> TextureMap:
    frame = np.asarray(frame, dtype=np.float64)
    if w < 2:
        raise ValueError(f"patch size must be >= 2, got {w}")
    if frame.shape[0] < w or frame.shape[1] < w:
        raise FrameTooSmall(f"frame {frame.shape} smaller than one {w}x{w} patch")
    var = _patch_view(frame, w).var(axis=2)
    marked = var > tau_var * var.max()
    return TextureMap(marked, var, w, tau_var)


def gradient_map(frame) -> np.ndarray:
    """Per-pixel L2 norm of central-difference intensity gradients."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[0] < 2 or frame.shape[1] < 2:
        raise FrameTooSmall(f"gradient needs a 2-D frame of at least 2x2, got {frame.shape}")
    gy, gx = np.gradient(frame)
    return np.hypot(gx, gy)


def select_seeds(texmap: TextureMap, gradmap, occupied, limit: int) -> np.ndarray:
    """Highest-gradient pixel of every marked, unoccupied patch, best ``limit`` first.

    Returns an (K, 2) array of (x, y) pixel positions.
    """
    w = texmap.w
    gh, gw = texmap.marked.shape
    if limit <= 0:
        return np.empty((0, 2))
    patches = _patch_view(np.asarray(gradmap, dtype=np.float64), w)
    local = patches.argmax(axis=2)
    best = np.take_along_axis(patches, local[..., None], axis=2)[..., 0]
    cand = texmap.marked & ~np.asarray(occupied, dtype=bool)
    pidx = np.flatnonzero(cand)
    if len(pidx) == 0:
        return np.empty((0, 2))
    vals = best.ravel()[pidx]
    order = np.lexsort((pidx, -vals))[:limit]
    pidx = pidx[order]
    m, n = np.divmod(pidx, gw)
    dr, dc = np.divmod(local.ravel()[pidx], w)
    return np.stack([n * w + dc, m * w + dr], axis=1).astype(np.float64)


def pixel_of(positions):
    """Nearest integer pixel (col, row) for (x, y) positions."""
    return np.floor(np.asarray(positions, dtype=np.float64) + 0.5).astype(np.int64)


def patch_index(positions, w: int, grid_shape) -> np.ndarray:
    """Flat row-major patch index of each position, -1 when outside the patch grid."""
    px = pixel_of(positions).reshape(-1, 2)
    gh, gw = grid_shape
    m, n = px[:, 1] // w, px[:, 0] // w
    ok = (px[:, 0] >= 0) & (px[:, 1] >= 0) & (m < gh) & (n < gw)
    return np.where(ok, m * gw + n, -1)


def visibility_filter(tracks: TrackSet) -> TrackSet:
    return tracks.with_trajectories(tr for tr in tracks.trajectories if tr.visibility.all())


def distribution_filter(tracks: TrackSet, gradmaps, w: int) -> TrackSet:
    """Keep one trajectory per patch per frame, sweeping frames in order.

    Colliding trajectories are ranked by gradient norm at their frame-i pixel
    (ties to the smaller id); losers are removed entirely.
    """
    trajs = tracks.trajectories
    if len(trajs) < 2:
        return tracks.with_trajectories(trajs)
    N = tracks.num_frames
    if len(gradmaps) < N:
        raise ValueError(f"need {N} gradient maps, got {len(gradmaps)}")
    shape = np.asarray(gradmaps[0]).shape
    grid = (shape[0] // w, shape[1] // w)
    T = len(trajs)
    ids = np.array([tr.id for tr in trajs])
    starts = np.array([tr.start for tr in trajs])
    ends = np.array([tr.end for tr in trajs])
    alive = np.ones(T, dtype=bool)
    for i in range(N):
        rows = np.flatnonzero(alive & (starts <= i) & (ends >= i))
        if len(rows) < 2:
            continue
        pos = np.array([trajs[r].at(i) for r in rows])
        keys = patch_index(pos, w, grid)
        inside = keys >= 0
        rows, keys, pos = rows[inside], keys[inside], pos[inside]
        if len(np.unique(keys)) == len(keys):
            continue
        px = pixel_of(pos)
        g = np.asarray(gradmaps[i])[px[:, 1], px[:, 0]]
        order = np.lexsort((ids[rows], -g, keys))
        sk = keys[order]
        first = np.ones(len(sk), dtype=bool)
        first[1:] = sk[1:] != sk[:-1]
        alive[rows[order][~first]] = False
    return tracks.with_trajectories(tr for tr, a in zip(trajs, alive) if a)


@dataclass
class SupervisionSet:
    dims: FrameDims
    budget: int
    points: np.ndarray  # (N, B, 2)
    ids: np.ndarray  # (N, B) int, -1 = unfilled
    ranges: np.ndarray  # (H, 2) inclusive [start, end]
    sources: np.ndarray | None = field(default=None, compare=False)  # (H,) synthetic point ids

    @property
    def num_frames(self) -> int:
        return self.points.shape[0]

    @property
    def num_tracks(self) -> int:
        return len(self.ranges)

    def flat(self):
        """Observation arrays (frame, track, uv) in frame-major, slot order."""
        N, B = self.ids.shape
        return np.repeat(np.arange(N), B), self.ids.reshape(-1), self.points.reshape(-1, 2)

    def same_as(self, other: "SupervisionSet") -> bool:
        return (
            self.dims == other.dims
            and self.budget == other.budget
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.ranges, other.ranges)
        )

    def check(self, w: int | None = None) -> None:
        """Raise ValueError unless the set is final: full, valid ids, one point per patch."""
        N, B = self.ids.shape
        if B != self.budget:
            raise ValueError(f"expected {self.budget} slots per frame, got {B}")
        if np.any(self.ids < 0) or np.any(self.ids >= self.num_tracks):
            raise ValueError("supervision has unfilled or out-of-range indices")
        if w is not None:
            grid = (self.dims.height // w, self.dims.width // w)
            for i in range(N):
                k = patch_index(self.points[i], w, grid)
                k = k[k >= 0]
                if len(np.unique(k)) != len(k):
                    raise ValueError(f"frame {i} has two points in one {w}px patch")


def compute_maps(frames, w: int, tau_var: float, threads: int | None = None):
    """Texture and gradient maps for every frame; order of results matches input."""
    if threads is None:
        threads = int(os.environ.get("ROSCAM_THREADS", "0")) or min(8, os.cpu_count() or 1)

    def one(frame):
        return texture_map(frame, w, tau_var), gradient_map(frame)

    if threads <= 1:
        res = [one(f) for f in frames]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(one, frames))
    return [r[0] for r in res], [r[1] for r in res]


def _coverage(trajs, N):
    counts = np.zeros(N + 1, dtype=np.int64)
    for tr in trajs:
        counts[tr.start] += 1
        counts[tr.end + 1] -= 1
    return np.cumsum(counts)[:N]


def _clip_at_first_invisible(tr: Trajectory) -> Trajectory | None:
    bad = np.flatnonzero(~tr.visibility)
    if len(bad) == 0:
        return tr
    if bad[0] == 0:
        return tr  # invisible at its seed frame: the visibility filter drops it
    return tr.truncated(tr.start + int(bad[0]) - 1)


def extract_supervision(
    frames,
    tracker: Tracker,
    budget: int = 100,
    w: int | None = None,
    tau_var: float = 0.1,
    threads: int | None = None,
) -> tuple[SupervisionSet, dict]:
    """Distill tracker output on ``frames`` into exactly ``budget`` points per frame.

    Returns the supervision set and a small stats dict (iterations, seed
    frames, runtime bookkeeping is left to callers).
    """
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    N = len(frames)
    if N < 2:
        raise ValueError("need at least two frames")
    rows, cols = frames[0].shape
    dims = FrameDims(cols, rows)
    if w is None:
        w = default_patch_size(cols)
    texmaps, gradmaps = compute_maps(frames, w, tau_var, threads)
    grid = texmaps[0].marked.shape
    tried = np.zeros((N,) + grid, dtype=bool)

    live: list[Trajectory] = []
    next_id = 0
    seed_frames: list[int] = []
    cap = 50 * N
    it = 0
    while True:
        counts = _coverage(live, N)
        short = np.flatnonzero(counts < budget)
        if len(short) == 0:
            break
        it += 1
        if it > cap:
            raise NonTermination(f"supervision not full after {cap} iterations")
        t = int(short[0])
        occupied = tried[t].copy()
        here = [tr.at(t) for tr in live if tr.covers(t)]
        if here:
            k = patch_index(np.array(here), w, grid)
            occupied.ravel()[k[k >= 0]] = True
        seeds = select_seeds(texmaps[t], gradmaps[t], occupied, budget - int(counts[t]))
        if len(seeds) == 0:
            raise InsufficientTexture(
                f"frame {t}: only {counts[t]} of {budget} points after exhausting textured patches"
            )
        tried[t].ravel()[patch_index(seeds, w, grid)] = True
        seed_frames.append(t)

        new = _track_seeds(tracker, frames, t, seeds)
        if not new:
            continue
        for tr in new:
            tr.id = next_id
            next_id += 1
        new = [_clip_at_first_invisible(tr) for tr in new]

        merged = TrackSet(dims, N, live + new)
        merged = visibility_filter(merged)
        merged = distribution_filter(merged, gradmaps, w)
        live = _enforce_capacity(merged.trajectories, min(tr.id for tr in new), N, budget)
        log.debug("iteration %d at frame %d: %d live trajectories", it, t, len(live))

    live.sort(key=lambda tr: tr.id)
    sup = _assemble(live, dims, N, budget)
    return sup, {"iterations": it, "seed_frames": seed_frames, "patch": w}


def _track_seeds(tracker, frames, t, seeds):
    keep = np.arange(len(seeds))
    while len(keep):
        try:
            res = tracker.track(TrackQuery(t, seeds[keep]), frames)
        except BackendFailure as exc:
            if not exc.unmatched:
                raise
            drop = set(exc.unmatched)
            keep = np.array([k for j, k in enumerate(keep) if j not in drop], dtype=np.int64)
            continue
        return list(res.trajectories)
    return []


def _enforce_capacity(trajs, first_new_id, N, budget):
    """Cut new trajectories where a frame is already full; older ones keep priority."""
    old = [tr for tr in trajs if tr.id < first_new_id]
    new = sorted((tr for tr in trajs if tr.id >= first_new_id), key=lambda tr: tr.id)
    counts = _coverage(old, N)
    kept = list(old)
    for tr in new:
        full = np.flatnonzero(counts[tr.start : tr.end + 1] >= budget)
        if len(full):
            if full[0] == 0:
                continue
            tr = tr.truncated(tr.start + int(full[0]) - 1)
        counts[tr.start : tr.end + 1] += 1
        kept.append(tr)
    return kept


def _assemble(live, dims, N, budget) -> SupervisionSet:
    H = len(live)
    points = np.zeros((N, budget, 2))
    ids = np.full((N, budget), -1, dtype=np.int64)
    fill = np.zeros(N, dtype=np.int64)
    ranges = np.zeros((H, 2), dtype=np.int64)
    sources = np.full(H, -1, dtype=np.int64)
    for h, tr in enumerate(live):
        ranges[h] = (tr.start, tr.end)
        if tr.source is not None:
            sources[h] = tr.source
        for i in range(tr.start, tr.end + 1):
            points[i, fill[i]] = tr.at(i)
            ids[i, fill[i]] = h
            fill[i] += 1
    return SupervisionSet(dims, budget, points, ids, ranges, sources)


def write_supervision(sup: SupervisionSet, path) -> None:
    N, B = sup.ids.shape
    lines = [f"SUPERVISION v1 {N} {sup.dims.width} {sup.dims.height} {B} {sup.num_tracks}"]
    for i in range(N):
        parts = [str(i)]
        for (x, y), h in zip(sup.points[i], sup.ids[i]):
            parts += [repr(float(x)), repr(float(y)), str(int(h))]
        lines.append(" ".join(parts))
    for h, (s, e) in enumerate(sup.ranges):
        lines.append(f"traj {h} {s} {e}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_supervision(path) -> SupervisionSet:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 7 or head[:2] != ["SUPERVISION", "v1"]:
        raise ValueError(f"{path}: bad supervision header")
    N, W, Hgt, B, Htot = (int(v) for v in head[2:])
    points = np.zeros((N, B, 2))
    ids = np.full((N, B), -1, dtype=np.int64)
    ranges = np.zeros((Htot, 2), dtype=np.int64)
    seen = 0
    for ln in lines[1:]:
        tok = ln.split()
        if tok[0] == "traj":
            ranges[int(tok[1])] = (int(tok[2]), int(tok[3]))
            continue
        i = int(tok[0])
        body = tok[1:]
        if len(body) != 3 * B:
            raise ValueError(f"{path}: frame {i} has {len(body) // 3} entries, expected {B}")
        points[i, :, 0] = [float(v) for v in body[0::3]]
        points[i, :, 1] = [float(v) for v in body[1::3]]
        ids[i] = [int(v) for v in body[2::3]]
        seen += 1
    if seen != N:
        raise ValueError(f"{path}: {seen} frame lines for {N} frames")
    return SupervisionSet(FrameDims(W, Hgt), B, points, ids, ranges)
