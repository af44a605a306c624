"""Outlier-aware joint optimization of points, focal, poses and uncertainties.

Per observation k (frame i, track h, observed pixel u_k):

    cam_k = R(q_i) p_h + t_i,   z_k = cam_k[2]
    e_k   = || f cam_k[:2] / z_k + c - u_k ||^2
    A_h   = mean of e_k over the observations of h
    L     = mean_h log(G_h + A_h^2 / G_h) + R_depth,   G = softplus(raw)

Gradients are analytic and vectorized; the chain runs through quaternion
normalization, the perspective division, the per-track averaging, the
log and the softplus.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import EPS_DIV, FrameDims, _unit_quat_to_rotation, normalize_quat, sigmoid, softplus
from .core import unit_quat_rotation_jacobian

log = logging.getLogger(__name__)

GAMMA_FLOOR = 1e-8
BLOCKS = ("points", "focal", "quats", "trans", "raw")
# column suffixes used in loss traces
TRACE_NAMES = {"points": "points", "focal": "f", "quats": "Q", "trans": "t", "raw": "raw"}


class ShapeMismatch(ValueError):
    pass


class EmptyTrajectory(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, block: str, index):
        super().__init__(f"non-finite gradient in block {block!r} at index {index}")
        self.block = block
        self.index = index


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class ParameterState:
    points: np.ndarray  # (H, 3)
    focal: float
    quats: np.ndarray  # (N, 4) w, x, y, z; unnormalized
    trans: np.ndarray  # (N, 3)
    raw: np.ndarray  # (H,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(-1, 3)
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        self.focal = float(self.focal)
        if len(self.points) != len(self.raw):
            raise ShapeMismatch(f"{len(self.points)} points but {len(self.raw)} uncertainties")
        if len(self.quats) != len(self.trans):
            raise ShapeMismatch(f"{len(self.quats)} quaternions but {len(self.trans)} translations")

    @property
    def num_frames(self) -> int:
        return len(self.quats)

    @property
    def num_tracks(self) -> int:
        return len(self.points)

    @property
    def gamma(self) -> np.ndarray:
        return np.maximum(softplus(self.raw), GAMMA_FLOOR)

    def copy(self) -> "ParameterState":
        return ParameterState(self.points.copy(), self.focal, self.quats.copy(), self.trans.copy(), self.raw.copy())

    def block(self, name):
        return np.asarray(getattr(self, name), dtype=np.float64)

    def vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.block(b)) for b in BLOCKS])

    def with_vector(self, v) -> "ParameterState":
        out, k = {}, 0
        for b in BLOCKS:
            shape = np.shape(getattr(self, b))
            n = int(np.prod(shape))
            out[b] = np.reshape(v[k : k + n], shape)
            k += n
        out["focal"] = float(out["focal"])
        return ParameterState(**out)


@dataclass
class OptimizerConfig:
    lr_quats: float = 0.01
    lr_trans: float = 0.01
    lr_focal: float = 1.0
    lr_points: float = 0.01
    lr_raw: float = 0.01
    stage1_iters: int = 200
    stage2_iters: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    depth_reg_mode: str = "penalty"  # penalty | literal
    acp_power: int = 2  # 2 squares the ACP error inside the Cauchy term, 1 uses it as is
    loss: str = "cauchy"  # cauchy | l2
    keep_moments: bool = True  # carry Adam moments of the shared blocks into stage 2

    def __post_init__(self):
        for name in ("lr_quats", "lr_trans", "lr_focal", "lr_points", "lr_raw"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.depth_reg_mode not in ("penalty", "literal"):
            raise ValueError(f"unknown depth_reg_mode {self.depth_reg_mode!r}")
        if self.acp_power not in (1, 2):
            raise ValueError("acp_power must be 1 or 2")
        if self.loss not in ("cauchy", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def lr(self, block: str) -> float:
        return getattr(self, f"lr_{block}")


@dataclass
class LossReport:
    cauchy: float
    depth_reg: float
    total: float
    acp: np.ndarray
    grad_norms: dict = field(default_factory=dict)
    invalid: int = 0


class Problem:
    """Supervision flattened into observation arrays, ready for loss evaluation."""

    def __init__(self, sup, num_tracks: int | None = None):
        self.dims: FrameDims = sup.dims
        frame, track, uv = sup.flat()
        self.frame = np.asarray(frame, dtype=np.int64)
        self.track = np.asarray(track, dtype=np.int64)
        self.uv = np.asarray(uv, dtype=np.float64)
        self.N = sup.num_frames
        self.H = sup.num_tracks if num_tracks is None else num_tracks
        self.B = sup.budget
        if np.any(self.track < 0) or np.any(self.track >= self.H):
            raise ShapeMismatch("supervision indices outside [0, H)")
        self.count = np.bincount(self.track, minlength=self.H).astype(np.float64)

    def check(self, state: ParameterState) -> None:
        if state.num_tracks != self.H or state.num_frames != self.N:
            raise ShapeMismatch(
                f"state has H={state.num_tracks}, N={state.num_frames}; supervision has H={self.H}, N={self.N}"
            )


def _as_problem(sup) -> Problem:
    return sup if isinstance(sup, Problem) else Problem(sup)


def _forward(state: ParameterState, prob: Problem):
    qh = normalize_quat(state.quats)
    R = _unit_quat_to_rotation(qh)
    P = state.points[prob.track]
    Rk = R[prob.frame]
    cam = np.einsum("kij,kj->ki", Rk, P) + state.trans[prob.frame]
    z = cam[:, 2]
    valid = np.abs(z) > EPS_DIV
    zs = np.where(valid, z, 1.0)
    f = state.focal
    proj = np.stack([f * cam[:, 0] / zs + prob.dims.cx, f * cam[:, 1] / zs + prob.dims.cy], axis=1)
    r = np.where(valid[:, None], proj - prob.uv, 0.0)
    return qh, R, P, cam, z, zs, valid, r


def residuals(state: ParameterState, sup) -> np.ndarray:
    """Squared pixel errors per observation, shape (N, B); invalid-depth entries are 0."""
    prob = _as_problem(sup)
    prob.check(state)
    r = _forward(state, prob)[-1]
    return (r * r).sum(axis=1).reshape(prob.N, prob.B)


def acp_error(state: ParameterState, sup) -> np.ndarray:
    """Mean squared reprojection error of each track over its observations."""
    prob = _as_problem(sup)
    prob.check(state)
    if np.any(prob.count == 0):
        raise EmptyTrajectory(f"track(s) {np.flatnonzero(prob.count == 0)[:5].tolist()} have no observations")
    e = residuals(state, prob).ravel()
    return np.bincount(prob.track, weights=e, minlength=prob.H) / prob.count


def cauchy_loss(acp, raw, acp_power: int = 2) -> float:
    acp = np.asarray(acp, dtype=np.float64)
    gamma = np.maximum(softplus(np.asarray(raw, dtype=np.float64)), GAMMA_FLOOR)
    a = acp**acp_power
    return float(np.mean(np.log(gamma + a / gamma)))


def depth_regularizer(state: ParameterState, sup, mode: str = "penalty") -> float:
    prob = _as_problem(sup)
    prob.check(state)
    z = _forward(state, prob)[4]
    return _depth_reg(z, prob, mode)[0]


def _depth_reg(z, prob, mode):
    if mode == "penalty":
        val = np.maximum(-z, 0.0).sum() / len(z)
        dz = np.where(z < 0, -1.0 / len(z), 0.0)
    elif mode == "literal":
        val = -np.maximum(z, 0.0).sum() / prob.N
        dz = np.where(z > 0, -1.0 / prob.N, 0.0)
    else:
        raise ValueError(f"unknown depth regularizer mode {mode!r}")
    return float(val), dz


def total_loss(state: ParameterState, sup, config: OptimizerConfig | None = None) -> LossReport:
    report, _ = loss_and_gradients(state, sup, config, active=())
    return report


def gradients(state: ParameterState, sup, config: OptimizerConfig | None = None, active=BLOCKS) -> dict:
    return loss_and_gradients(state, sup, config, active)[1]


def loss_and_gradients(state: ParameterState, sup, config: OptimizerConfig | None = None, active=BLOCKS):
    """Loss report and per-block gradients; inactive blocks get exact zeros."""
    config = config or OptimizerConfig()
    prob = _as_problem(sup)
    prob.check(state)
    active = tuple(active)
    unknown = set(active) - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown parameter blocks {sorted(unknown)}")
    qh, R, P, cam, z, zs, valid, r = _forward(state, prob)
    e = (r * r).sum(axis=1)
    sums = np.bincount(prob.track, weights=e, minlength=prob.H)
    if np.any(prob.count == 0):
        raise EmptyTrajectory("every track needs at least one observation")
    acp = sums / prob.count
    reg, dreg_dz = _depth_reg(z, prob, config.depth_reg_mode)

    g_raw = np.zeros(prob.H)
    if config.loss == "cauchy":
        sp = softplus(state.raw)
        gamma = np.maximum(sp, GAMMA_FLOOR)
        a = acp**config.acp_power
        inner = gamma + a / gamma
        data = float(np.mean(np.log(inner)))
        da = (config.acp_power * acp ** (config.acp_power - 1) / gamma) / inner / prob.H
        dgamma = (1.0 - a / gamma**2) / inner / prob.H
        g_raw = np.where(sp > GAMMA_FLOOR, dgamma * sigmoid(state.raw), 0.0)
        de = da[prob.track] / prob.count[prob.track]
    else:
        M = len(e)
        data = float(e.sum() / M)
        de = np.full(M, 1.0 / M)

    report = LossReport(cauchy=data, depth_reg=reg, total=data + reg, acp=acp, invalid=int((~valid).sum()))
    if not np.isfinite(report.total):
        raise NonFiniteLoss(f"loss is {report.total}")
    grads = {b: np.zeros_like(state.block(b)) for b in BLOCKS}
    if not active:
        return report, grads

    # d e_k / d cam_k through the perspective division
    f = state.focal
    w = (2.0 * de)[:, None] * r  # dL/dproj
    inv_z = np.where(valid, 1.0 / zs, 0.0)
    g_cam = np.empty_like(cam)
    g_cam[:, 0] = w[:, 0] * f * inv_z
    g_cam[:, 1] = w[:, 1] * f * inv_z
    g_cam[:, 2] = -(w[:, 0] * cam[:, 0] + w[:, 1] * cam[:, 1]) * f * inv_z**2 + dreg_dz

    if "focal" in active:
        grads["focal"] = np.asarray((w[:, 0] * cam[:, 0] * inv_z + w[:, 1] * cam[:, 1] * inv_z).sum())
    if "points" in active:
        g_p = np.einsum("kji,kj->ki", R[prob.frame], g_cam)
        grads["points"] = np.zeros((prob.H, 3))
        np.add.at(grads["points"], prob.track, g_p)
    if "trans" in active:
        grads["trans"] = np.zeros((prob.N, 3))
        np.add.at(grads["trans"], prob.frame, g_cam)
    if "quats" in active:
        outer = g_cam[:, :, None] * P[:, None, :]
        G = np.zeros((prob.N, 3, 3))
        np.add.at(G, prob.frame, outer)
        g_qh = np.einsum("najk,njk->na", unit_quat_rotation_jacobian(qh), G)
        norms = np.linalg.norm(state.quats, axis=1, keepdims=True)
        grads["quats"] = (g_qh - (g_qh * qh).sum(axis=1, keepdims=True) * qh) / norms
    if "raw" in active:
        grads["raw"] = g_raw

    for b in BLOCKS:
        if b not in active:
            grads[b] = np.zeros_like(state.block(b))
            continue
        bad = ~np.isfinite(grads[b])
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            raise NonFiniteGradient(b, tuple(int(v) for v in idx))
    grads["focal"] = float(grads["focal"])
    report.grad_norms = {b: float(np.linalg.norm(grads[b])) for b in BLOCKS}
    return report, grads


@dataclass
class AdamMoments:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, state: ParameterState) -> "AdamMoments":
        return cls(
            {b: np.zeros_like(state.block(b)) for b in BLOCKS},
            {b: np.zeros_like(state.block(b)) for b in BLOCKS},
        )


def adam_step(state: ParameterState, grads: dict, moments: AdamMoments, config: OptimizerConfig, active=BLOCKS):
    """One bias-corrected Adam update of the active blocks; returns (state, moments)."""
    t = moments.step + 1
    new = {}
    m_out, v_out = dict(moments.m), dict(moments.v)
    for b in BLOCKS:
        x = state.block(b)
        if b not in active:
            new[b] = x.copy()
            continue
        g = np.asarray(grads[b], dtype=np.float64)
        if g.shape != x.shape:
            raise ShapeMismatch(f"gradient for {b} has shape {g.shape}, expected {x.shape}")
        m = config.beta1 * moments.m[b] + (1 - config.beta1) * g
        v = config.beta2 * moments.v[b] + (1 - config.beta2) * g * g
        mhat = m / (1 - config.beta1**t)
        vhat = v / (1 - config.beta2**t)
        new[b] = x - config.lr(b) * mhat / (np.sqrt(vhat) + config.eps)
        m_out[b], v_out[b] = m, v
    new["focal"] = float(new["focal"])
    return ParameterState(**new), AdamMoments(m_out, v_out, t)


def initial_state(sup, dims: FrameDims | None = None) -> ParameterState:
    """Identity cameras, f0 = 0.7 max(W, H), points unprojected at depth 1 from first sighting."""
    dims = dims or sup.dims
    N, H = sup.num_frames, sup.num_tracks
    f0 = 0.7 * max(dims.width, dims.height)
    points = np.zeros((H, 3))
    frame, track, uv = sup.flat()
    seen = np.zeros(H, dtype=bool)
    # observations are frame-major, so the first hit per track is its earliest sighting
    _, first = np.unique(track, return_index=True)
    for k in first:
        h = track[k]
        points[h] = ((uv[k, 0] - dims.cx) / f0, (uv[k, 1] - dims.cy) / f0, 1.0)
        seen[h] = True
    if not seen.all():
        raise EmptyTrajectory("every track needs at least one observation")
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (N, 1))
    return ParameterState(points, f0, quats, np.zeros((N, 3)), np.ones(H))


@dataclass
class TraceEntry:
    iter: int
    stage: int
    report: LossReport


def _run(state, prob, config, iters, active, stage, start_iter, trace, moments=None):
    moments = moments or AdamMoments.zeros_like(state)
    k = 0
    try:
        for k in range(iters):
            report, grads = loss_and_gradients(state, prob, config, active)
            trace.append(TraceEntry(start_iter + k, stage, report))
            state, moments = adam_step(state, grads, moments, config, active)
        k = iters
        report, _ = loss_and_gradients(state, prob, config, active)
    except NonFiniteLoss as e:
        raise NonFiniteLoss(f"{e} at iteration {start_iter + k}", trace) from None
    trace.append(TraceEntry(start_iter + iters, stage, report))
    return state, moments


def optimize_two_stage(init: ParameterState, sup, config: OptimizerConfig | None = None):
    """Stage 1 with raw frozen at 1, then raw := ACP error and all blocks free.

    Each stage logs one trace entry per step (loss before the step) plus one
    for its end state. Returns (state, trace).
    """
    config = config or OptimizerConfig()
    prob = _as_problem(sup)
    prob.check(init)
    trace: list[TraceEntry] = []
    state = init.copy()
    state.raw = np.ones(prob.H)
    stage1_blocks = ("points", "focal", "quats", "trans")
    state, moments = _run(state, prob, config, config.stage1_iters, stage1_blocks, 1, 0, trace)
    state.raw = acp_error(state, prob)
    log.info("stage 1 done: total %.6g", trace[-1].report.total)
    if not config.keep_moments:
        moments = None
    state, _ = _run(state, prob, config, config.stage2_iters, BLOCKS, 2, config.stage1_iters, trace, moments)
    return state, trace


def optimize_single_stage(init: ParameterState, sup, config: OptimizerConfig | None = None, iters: int = 250):
    """All blocks free from the first step (the ablation of the two-stage schedule)."""
    config = config or OptimizerConfig()
    prob = _as_problem(sup)
    prob.check(init)
    trace: list[TraceEntry] = []
    active = BLOCKS if config.loss == "cauchy" else ("points", "focal", "quats", "trans")
    state, _ = _run(init.copy(), prob, config, iters, active, 1, 0, trace)
    return state, trace


def optimize_blocks(init: ParameterState, sup, config: OptimizerConfig | None = None, iters: int = 100, active=BLOCKS):
    """Adam on the named blocks only, everything else held fixed. Returns (state, trace)."""
    config = config or OptimizerConfig()
    prob = _as_problem(sup)
    prob.check(init)
    trace: list[TraceEntry] = []
    state, _ = _run(init.copy(), prob, config, iters, tuple(active), 1, 0, trace)
    return state, trace


TRACE_COLUMNS = ["iter", "stage", "cauchy", "depth_reg", "total"] + [f"grad_norm_{TRACE_NAMES[b]}" for b in BLOCKS]


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_COLUMNS)
        for e in trace:
            r = e.report
            norms = [repr(r.grad_norms.get(b, 0.0)) for b in BLOCKS]
            wr.writerow([e.iter, e.stage, repr(r.cauchy), repr(r.depth_reg), repr(r.total), *norms])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("iter", "stage") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def write_gnuplot(trace_csv, path) -> None:
    """Small gnuplot script plotting the loss terms of a trace CSV against iteration."""
    name = Path(trace_csv).name
    Path(path).write_text(
        "set datafile separator ','\n"
        "set xlabel 'iteration'\n"
        "set ylabel 'loss'\n"
        f"plot '{name}' using 1:3 with lines title 'cauchy', \\\n"
        f"     '{name}' using 1:4 with lines title 'depth_reg', \\\n"
        f"     '{name}' using 1:5 with lines title 'total'\n"
    )


def config_fields() -> dict:
    return {f.name: f.type for f in fields(OptimizerConfig)}


__all__ = [
    "AdamMoments",
    "BLOCKS",
    "LossReport",
    "OptimizerConfig",
    "ParameterState",
    "Problem",
    "acp_error",
    "adam_step",
    "cauchy_loss",
    "depth_regularizer",
    "gradients",
    "initial_state",
    "loss_and_gradients",
    "optimize_blocks",
    "optimize_single_stage",
    "optimize_two_stage",
    "residuals",
    "total_loss",
    "read_trace",
    "write_gnuplot",
    "write_trace",
]
