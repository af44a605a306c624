"""``roscam`` command line: synth, extract, optimize, eval and pipeline.

Exit codes: 0 success, 1 bad configuration, 2 insufficient texture, 3 I/O
or malformed input file, 4 non-finite loss, 5 trajectory length mismatch.
Diagnostics go to stderr; stdout carries only machine-readable output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import LengthMismatch, ate, from_world_to_camera, read_poses, rpe, align, write_poses
from .filters import FrameTooSmall, InsufficientTexture, extract_supervision, read_supervision, to_grayscale, write_supervision
from .optim import NonFiniteLoss, OptimizerConfig, initial_state, optimize_two_stage, write_gnuplot, write_trace
from .synth import InfeasibleConfig, SceneConfig, generate_scene, render_frames, synthetic_tracker
from .tracking import FileTracker, write_tracks

log = logging.getLogger("roscam")

EXIT_CONFIG, EXIT_TEXTURE, EXIT_IO, EXIT_NONFINITE, EXIT_LENGTH = 1, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    """A file could not be read or parsed."""


@dataclass
class RunConfig:
    """Every tunable of extraction and optimization; merged defaults <- file <- flags."""

    patch: int = 0  # 0 picks 12 px up to 854 px wide frames, 24 px above
    tau_var: float = 0.1
    budget: int = 100
    threads: int = 0  # 0 defers to ROSCAM_THREADS or the CPU count
    match_radius: float = 2.0
    lr_quats: float = 0.01
    lr_trans: float = 0.01
    lr_focal: float = 1.0
    lr_points: float = 0.01
    lr_raw: float = 0.01
    stage1: int = 200
    stage2: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    depth_reg: str = "penalty"
    acp_power: int = 2
    keep_moments: bool = True
    align: str = "sim3"
    delta: int = 1

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().updated(_parse_kv(text, {f.name: f.type for f in fields(cls)}, "run config"))

    def updated(self, values: dict) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(self)}
        merged = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in values.items():
            if k not in kinds:
                raise ConfigError(f"unknown run config key {k!r}")
            if v is not None:
                merged[k] = v
        cfg = RunConfig(**merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.depth_reg not in ("penalty", "literal"):
            raise ConfigError(f"depth_reg must be penalty or literal, got {self.depth_reg!r}")
        if self.acp_power not in (1, 2):
            raise ConfigError("acp_power must be 1 or 2")
        if self.align not in ("sim3", "se3", "none"):
            raise ConfigError(f"align must be sim3, se3 or none, got {self.align!r}")
        if self.budget < 1 or self.stage1 < 0 or self.stage2 < 0 or self.delta < 1:
            raise ConfigError("budget and delta must be >= 1, stage iterations >= 0")
        if self.patch < 0 or self.patch == 1 or not 0 <= self.tau_var <= 1:
            raise ConfigError("patch must be 0 or >= 2 and tau_var in [0, 1]")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr_quats=self.lr_quats,
            lr_trans=self.lr_trans,
            lr_focal=self.lr_focal,
            lr_points=self.lr_points,
            lr_raw=self.lr_raw,
            stage1_iters=self.stage1,
            stage2_iters=self.stage2,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            depth_reg_mode=self.depth_reg,
            acp_power=self.acp_power,
            keep_moments=self.keep_moments,
        )


def _parse_kv(text: str, kinds: dict, what: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{what} line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in kinds:
            raise ConfigError(f"{what} line {lineno}: unknown key {k!r}")
        kind = kinds[k]
        try:
            if kind == "bool":
                if v.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(v)
                out[k] = v.lower() in ("true", "1")
            elif kind == "int":
                out[k] = int(v)
            elif kind == "float":
                out[k] = float(v)
            else:
                out[k] = v
        except ValueError:
            raise ConfigError(f"{what} line {lineno}: bad value {v!r} for {k}") from None
    return out


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_text(_read_text(args.config))
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    return cfg.updated(overrides)


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror or e}") from None


def _scene_config(path, seed) -> SceneConfig:
    over = {} if seed is None else {"seed": seed}
    if path is None:
        return SceneConfig(**over)
    try:
        return SceneConfig.from_text(_read_text(path), **over)
    except (TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise ConfigError(f"scene config {path}: {e}") from None


def load_frames(directory) -> list[np.ndarray]:
    """8-bit PNG frames of a directory in lexicographic file-name order, as grayscale in [0, 1]."""
    from PIL import Image

    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{d} is not a directory")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise InputError(f"no PNG frames in {d}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as im:
                if im.mode not in ("L", "RGB", "RGBA"):
                    if im.mode.startswith(("I", "F")):
                        raise InputError(f"{p}: only 8-bit images are supported, got mode {im.mode}")
                    im = im.convert("RGB")
                frames.append(to_grayscale(np.asarray(im)))
        except OSError as e:
            raise InputError(f"cannot read frame {p}: {e}") from None
    if len({f.shape for f in frames}) != 1:
        raise InputError(f"frames in {d} differ in size")
    return frames


def save_frames(frames, directory) -> None:
    from PIL import Image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        img = np.round(np.clip(f, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(d / f"frame_{i:05d}.png")


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _scene_config(args.config, args.seed)
    scene = generate_scene(cfg)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_frames(render_frames(scene), out / "frames")
        gt = from_world_to_camera(scene.quats, scene.trans, cfg.focal)
        write_poses(gt, out / "gt_poses.txt")
        write_tracks(synthetic_tracker(scene).full_tracks(), out / "tracks.txt")
        (out / "scene.txt").write_text(cfg.to_text())
    except OSError as e:
        raise InputError(f"cannot write scene to {out}: {e}") from None
    print(f"frames {cfg.num_frames}")
    print(f"points {scene.n_points}")
    print(f"out_dir {out}")
    return 0


def cmd_extract(args) -> int:
    rc = _run_config(args)
    if args.tracker == "synth":
        scene = generate_scene(_scene_config(args.scene, args.seed))
        frames = render_frames(scene)
        tracker = synthetic_tracker(scene)
    else:
        if not args.frames or not args.tracks:
            raise ConfigError("extract needs --frames and --tracks, or --tracker synth")
        frames = load_frames(args.frames)
        try:
            tracker = FileTracker.from_file(args.tracks, radius=rc.match_radius)
        except OSError as e:
            raise InputError(f"cannot read {args.tracks}: {e.strerror or e}") from None
        except ValueError as e:
            raise InputError(str(e)) from None
        rows, cols = frames[0].shape
        if (tracker.dims.width, tracker.dims.height) != (cols, rows) or tracker.num_frames != len(frames):
            raise InputError(
                f"track file is for {tracker.num_frames} frames of {tracker.dims.width}x{tracker.dims.height}, "
                f"frames are {len(frames)} of {cols}x{rows}"
            )
    t0 = time.perf_counter()
    sup, stats = extract_supervision(
        frames, tracker, budget=rc.budget, w=rc.patch or None, tau_var=rc.tau_var, threads=rc.threads or None
    )
    elapsed = time.perf_counter() - t0
    try:
        write_supervision(sup, args.out)
    except OSError as e:
        raise InputError(f"cannot write {args.out}: {e.strerror or e}") from None
    fill = (sup.ids >= 0).sum(axis=1)
    print(f"H {sup.num_tracks}")
    print(f"fill {' '.join(str(int(v)) for v in fill)}")
    print(f"patch {stats['patch']}")
    print(f"iterations {stats['iterations']}")
    print(f"runtime_s {elapsed:.6g}")
    return 0


def cmd_optimize(args) -> int:
    rc = _run_config(args)
    try:
        sup = read_supervision(args.supervision)
    except OSError as e:
        raise InputError(f"cannot read {args.supervision}: {e.strerror or e}") from None
    except ValueError as e:
        raise InputError(str(e)) from None
    init = initial_state(sup)
    t0 = time.perf_counter()
    try:
        state, trace = optimize_two_stage(init, sup, rc.optimizer())
    except NonFiniteLoss as e:
        if e.trace is not None:
            _write_trace_files(e.trace, args.trace)
        raise
    elapsed = time.perf_counter() - t0
    est = from_world_to_camera(state.quats, state.trans, state.focal)
    try:
        write_poses(est, args.out)
        _write_trace_files(trace, args.trace)
    except OSError as e:
        raise InputError(f"cannot write results: {e}") from None
    print(f"focal {state.focal!r}")
    print(f"loss {trace[-1].report.total!r}")
    print(f"runtime_s {elapsed:.6g}")
    return 0


def _write_trace_files(trace, path) -> None:
    if not path:
        return
    write_trace(trace, path)
    write_gnuplot(path, Path(path).with_suffix(".gp"))


def cmd_eval(args) -> int:
    rc = _run_config(args)
    try:
        est, gt = read_poses(args.est), read_poses(args.gt)
    except OSError as e:
        raise InputError(f"cannot read poses: {e.strerror or e}") from None
    except LengthMismatch:
        raise
    except ValueError as e:
        raise InputError(str(e)) from None
    for line in _metrics(est, gt, rc.align, rc.delta):
        print(line)
    return 0


def _metrics(est, gt, mode, delta) -> list[str]:
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} reference poses")
    a = ate(est, gt, mode)
    # relative errors are taken after the same alignment so that a
    # similarity-scaled estimate is compared at the reference scale
    aligned = est.transformed(align(est, gt, mode))
    rt, rr = rpe(aligned, gt, delta)
    return [f"ATE {a:.6g}", f"RPE_trans {rt:.6g}", f"RPE_rot {rr:.6g}"]


def cmd_pipeline(args) -> int:
    out = Path(args.out_dir)
    common = ["--config", args.config] if args.config else []
    steps = [
        ["synth", "--out-dir", str(out)] + (["--config", args.scene] if args.scene else [])
        + ([] if args.seed is None else ["--seed", str(args.seed)]),
        ["extract", "--frames", str(out / "frames"), "--tracks", str(out / "tracks.txt"),
         "--out", str(out / "supervision.txt")] + common,
        ["optimize", "--supervision", str(out / "supervision.txt"), "--out", str(out / "poses.txt"),
         "--trace", str(out / "trace.csv")] + common,
        ["eval", "--est", str(out / "poses.txt"), "--gt", str(out / "gt_poses.txt")] + common,
    ]
    for argv in steps:
        log.info("pipeline: %s", " ".join(argv))
        code = main(argv, _quiet=argv[0] != "eval")
        if code:
            return code
    return 0


# --- parser -----------------------------------------------------------------


def _add_run_flags(p, names):
    flags = {
        "patch": (int, "patch size in pixels (0 = from frame width)"),
        "tau_var": (float, "texture threshold as a fraction of the frame's max patch variance"),
        "budget": (int, "points per frame"),
        "threads": (int, "worker threads for per-frame maps"),
        "match_radius": (float, "pixel radius for matching seeds to track-file trajectories"),
        "stage1": (int, "stage-1 iterations"),
        "stage2": (int, "stage-2 iterations"),
        "depth_reg": (str, "depth regularizer: penalty or literal"),
        "acp_power": (int, "power applied to the per-track error inside the Cauchy term (1 or 2)"),
        "align": (str, "trajectory alignment: sim3, se3 or none"),
        "delta": (int, "frame gap for relative pose error"),
    }
    for n in names:
        kind, text = flags[n]
        p.add_argument("--" + n.replace("_", "-"), dest=n, type=kind, default=None, help=text)
    p.add_argument("--config", help="run config file (key=value lines)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roscam", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("--config", help="scene config file (key=value lines)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="build a supervision file from frames and a tracker")
    p.add_argument("--frames", help="directory of PNG frames")
    p.add_argument("--tracks", help="TRACKS v1 file serving tracker queries")
    p.add_argument("--tracker", choices=["file", "synth"], default="file")
    p.add_argument("--scene", help="scene config for --tracker synth")
    p.add_argument("--seed", type=int, help="scene seed for --tracker synth")
    p.add_argument("--out", required=True)
    _add_run_flags(p, ["patch", "tau_var", "budget", "threads", "match_radius"])
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("optimize", help="estimate poses, focal and points from a supervision file")
    p.add_argument("--supervision", required=True)
    p.add_argument("--out", required=True, help="camera-to-world pose file")
    p.add_argument("--trace", required=True, help="loss trace CSV (a gnuplot script is written next to it)")
    _add_run_flags(p, ["stage1", "stage2", "depth_reg", "acp_power"])
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="ATE and RPE of an estimated trajectory")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    _add_run_flags(p, ["align", "delta"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="synth, extract, optimize and eval into one directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scene", help="scene config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="run config file")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None, _quiet: bool = False) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if _quiet:
            with open(os.devnull, "w") as null:
                saved, sys.stdout = sys.stdout, null
                try:
                    return args.func(args)
                finally:
                    sys.stdout = saved
        return args.func(args)
    except (InsufficientTexture, FrameTooSmall) as e:
        print(f"roscam: insufficient texture: {e}", file=sys.stderr)
        return EXIT_TEXTURE
    except InputError as e:
        print(f"roscam: {e}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLoss as e:
        print(f"roscam: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except LengthMismatch as e:
        print(f"roscam: length mismatch: {e}", file=sys.stderr)
        return EXIT_LENGTH
    except (ConfigError, InfeasibleConfig) as e:
        print(f"roscam: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"roscam: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
