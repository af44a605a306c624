import numpy as np
import pytest
from PIL import Image

from roscam import __version__
from roscam.cli import RunConfig, ConfigError, main
from roscam.evaluation import TrajectoryEstimate, read_poses, write_poses
from roscam.filters import extract_supervision, read_supervision
from roscam.optim import read_trace
from roscam.synth import SceneConfig, generate_scene, render_frames, synthetic_tracker


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--out-dir", str(out), "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def sup_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("sup") / "sup.txt"
    assert main(["extract", "--tracker", "synth", "--seed", "0", "--out", str(out)]) == 0
    return out


def metrics(text):
    return {k: float(v) for k, v in (line.split() for line in text.strip().splitlines())}


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip() == __version__


def test_synth_writes_artifacts(synth_dir):
    frames = sorted((synth_dir / "frames").glob("*.png"))
    assert len(frames) == 50
    img = Image.open(frames[0])
    assert img.mode == "L" and img.size == (640, 480)
    for name in ("gt_poses.txt", "tracks.txt", "scene.txt"):
        assert (synth_dir / name).stat().st_size > 0
    assert read_poses(synth_dir / "gt_poses.txt").focal == 460.0


def test_synth_same_seed_is_byte_identical(tmp_path, synth_dir):
    assert main(["synth", "--out-dir", str(tmp_path), "--seed", "0"]) == 0
    for name in ("gt_poses.txt", "tracks.txt", "scene.txt", "frames/frame_00007.png"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synth_seeds_differ(tmp_path, synth_dir):
    cfg = tmp_path / "scene.txt"
    cfg.write_text("num_frames = 50\n")
    assert main(["synth", "--out-dir", str(tmp_path / "s1"), "--config", str(cfg), "--seed", "1"]) == 0
    assert (tmp_path / "s1" / "tracks.txt").read_bytes() != (synth_dir / "tracks.txt").read_bytes()


def test_extract_synthetic_fills_budget(sup_file, capsys):
    sup = read_supervision(sup_file)
    assert sup.ids.shape == (50, 100)
    sup.check(12)


def test_extract_file_round_trip_matches_memory(sup_file):
    scene = generate_scene(SceneConfig(seed=0))
    mem, _ = extract_supervision(render_frames(scene), synthetic_tracker(scene))
    assert read_supervision(sup_file).same_as(mem)


def test_extract_from_png_and_track_file(tmp_path, synth_dir, capsys):
    out = tmp_path / "sup.txt"
    code = main(["extract", "--frames", str(synth_dir / "frames"), "--tracks", str(synth_dir / "tracks.txt"),
                 "--out", str(out), "--budget", "40"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("H ")
    assert "fill " + " ".join(["40"] * 50) in stdout
    read_supervision(out).check(12)


def test_extract_textureless_exits_2(tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(3):
        Image.fromarray(np.full((48, 60), 90, np.uint8)).save(frames / f"{i:03d}.png")
    tracks = tmp_path / "tracks.txt"
    tracks.write_text("TRACKS v1 3 60 48\n")
    code = main(["extract", "--frames", str(frames), "--tracks", str(tracks), "--out", str(tmp_path / "s"),
                 "--budget", "10"])
    assert code == 2
    err = capsys.readouterr()
    assert "texture" in err.err and err.out == ""


def test_extract_missing_frames_exits_3(tmp_path):
    assert main(["extract", "--frames", str(tmp_path / "nope"), "--tracks", "x", "--out", "y"]) == 3


def test_optimize_zero_iterations_gives_initialization(tmp_path, sup_file):
    poses, trace = tmp_path / "p.txt", tmp_path / "t.csv"
    code = main(["optimize", "--supervision", str(sup_file), "--out", str(poses), "--trace", str(trace),
                 "--stage1", "0", "--stage2", "0"])
    assert code == 0
    est = read_poses(poses)
    assert est.focal == 0.7 * 640
    np.testing.assert_array_equal(est.rotations, np.tile(np.eye(3), (50, 1, 1)))
    assert not est.positions.any()
    assert len(read_trace(trace)) == 2
    assert (tmp_path / "t.gp").exists()


def test_optimize_is_deterministic(tmp_path, sup_file):
    outs = []
    for k in range(2):
        p = tmp_path / f"p{k}.txt"
        args = ["optimize", "--supervision", str(sup_file), "--out", str(p), "--trace", str(tmp_path / f"t{k}.csv"),
                "--stage1", "30", "--stage2", "10"]
        assert main(args) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_optimize_nonfinite_exits_4(tmp_path):
    sup = tmp_path / "bad.txt"
    sup.write_text("SUPERVISION v1 2 20 20 1 1\n0 inf 5.0 0\n1 5.0 5.0 0\ntraj 0 0 1\n")
    trace = tmp_path / "t.csv"
    code = main(["optimize", "--supervision", str(sup), "--out", str(tmp_path / "p.txt"), "--trace", str(trace)])
    assert code == 4
    assert trace.read_text().startswith("iter,stage")


def test_eval_cases(tmp_path, synth_dir, capsys):
    gt = read_poses(synth_dir / "gt_poses.txt")
    gt_file = synth_dir / "gt_poses.txt"
    assert main(["eval", "--est", str(gt_file), "--gt", str(gt_file)]) == 0
    m = metrics(capsys.readouterr().out)
    assert list(m) == ["ATE", "RPE_trans", "RPE_rot"]
    assert all(abs(v) < 1e-9 for v in m.values())

    scaled = tmp_path / "scaled.txt"
    write_poses(TrajectoryEstimate(gt.rotations, 3.0 * gt.positions), scaled)
    assert main(["eval", "--est", str(scaled), "--gt", str(gt_file), "--align", "sim3"]) == 0
    assert metrics(capsys.readouterr().out)["ATE"] < 1e-9
    assert main(["eval", "--est", str(scaled), "--gt", str(gt_file), "--align", "se3"]) == 0
    assert metrics(capsys.readouterr().out)["ATE"] > 1e-3


def test_eval_prints_six_significant_digits(tmp_path, synth_dir, capsys):
    gt = read_poses(synth_dir / "gt_poses.txt")
    est = tmp_path / "est.txt"
    write_poses(TrajectoryEstimate(gt.rotations, gt.positions + 0.0123456789), est)
    assert main(["eval", "--est", str(est), "--gt", str(synth_dir / "gt_poses.txt"), "--align", "none"]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first == f"ATE {0.0123456789 * np.sqrt(3):.6g}"


def test_eval_length_mismatch_exits_5(tmp_path, synth_dir):
    gt = read_poses(synth_dir / "gt_poses.txt")
    short = tmp_path / "short.txt"
    write_poses(TrajectoryEstimate(gt.rotations[:10], gt.positions[:10]), short)
    assert main(["eval", "--est", str(short), "--gt", str(synth_dir / "gt_poses.txt")]) == 5


def test_unknown_config_key_exits_1(tmp_path, synth_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("budget = 50\nbudjet = 10\n")
    gt = str(synth_dir / "gt_poses.txt")
    assert main(["eval", "--est", gt, "--gt", gt, "--config", str(cfg)]) == 1


def test_run_config_merge_order(tmp_path):
    cfg = RunConfig.from_text("stage1 = 10\ndepth_reg = literal\nkeep_moments = false\n")
    assert (cfg.stage1, cfg.stage2, cfg.depth_reg, cfg.keep_moments) == (10, 50, "literal", False)
    assert cfg.updated({"stage1": 3, "stage2": None}).stage1 == 3
    with pytest.raises(ConfigError):
        RunConfig.from_text("depth_reg = hinge\n")


def test_pipeline_recovers_clean_scene(tmp_path, capsys):
    assert main(["pipeline", "--out-dir", str(tmp_path / "a"), "--seed", "0"]) == 0
    m = metrics(capsys.readouterr().out)
    assert m["ATE"] < 1e-3
    assert main(["pipeline", "--out-dir", str(tmp_path / "b"), "--seed", "0"]) == 0
    capsys.readouterr()
    assert (tmp_path / "a" / "poses.txt").read_bytes() == (tmp_path / "b" / "poses.txt").read_bytes()
