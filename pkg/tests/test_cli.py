"""End-to-end command line coverage: exit codes, machine-readable errors,
artifact layout, determinism, and the phantom -> register -> transfer ->
simulate -> evaluate chain."""

import contextlib
import io
import json
import subprocess

import numpy as np
import pytest

from acunav.cli import main
from acunav.metrics import dice
from acunav.volume import load_mask, load_volume


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = 0
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as exc:
            code = 0 if exc.code is None else exc.code
    return code, out.getvalue(), err.getvalue()


def stderr_error(err: str) -> dict:
    return json.loads(err)["error"]


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantom")
    code, _, err = run_cli("phantom", "--out", d, "--seed", 7, "--deformed")
    assert code == 0, err
    return d


@pytest.fixture(scope="session")
def reg_dir(tmp_path_factory, phantom_dir):
    d = tmp_path_factory.mktemp("reg")
    code, _, err = run_cli(
        "register", "--template", phantom_dir / "volume.avf",
        "--target", phantom_dir / "deformed.avf", "--out", d)
    assert code == 0, err
    return d


@pytest.fixture(scope="session")
def sim_log(tmp_path_factory, phantom_dir):
    path = tmp_path_factory.mktemp("sim") / "log.jsonl"
    code, _, err = run_cli(
        "simulate", "--scene", phantom_dir, "--out", path, "--seed", 11,
        "--approach-frames", 6, "--insert-frames", 6, "--filter", "off",
        "--touch-landmarks")
    assert code == 0, err
    return path


# ---------------------------------------------------------------------------
# Exit codes and error envelopes
# ---------------------------------------------------------------------------

def test_version_flag():
    code, out, _ = run_cli("--version")
    assert code == 0
    assert out.strip() == "0.1.0"


def test_no_subcommand_is_validation_failure():
    code, _, err = run_cli()
    assert code == 1
    assert stderr_error(err)["kind"] == "validation"


def test_unknown_flag_is_validation_failure():
    code, _, err = run_cli("phantom", "--out", "/tmp/x", "--seed", 1,
                           "--bogus")
    assert code == 1
    assert stderr_error(err)["kind"] == "validation"


def test_missing_seed_rejected(tmp_path):
    code, _, err = run_cli("phantom", "--out", tmp_path / "p")
    assert code == 1
    assert "--seed" in stderr_error(err)["detail"]


def test_missing_input_is_io_failure(tmp_path):
    code, _, err = run_cli("evaluate", "--mode", "dice",
                           "--a", tmp_path / "missing.avf",
                           "--b", tmp_path / "missing.avf", "--label", 1)
    assert code == 2
    assert stderr_error(err)["kind"] == "io"


def test_bad_numeric_config_is_validation_failure(phantom_dir, tmp_path):
    code, _, err = run_cli(
        "register", "--template", phantom_dir / "volume.avf",
        "--target", phantom_dir / "deformed.avf",
        "--out", tmp_path / "r", "--timesteps", 0)
    assert code == 1
    assert stderr_error(err)["kind"] == "validation"


def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run(["acunav", "--version"], capture_output=True,
                        text=True)
    assert ok.returncode == 0 and ok.stdout.strip() == "0.1.0"
    bad = subprocess.run(
        ["acunav", "evaluate", "--mode", "dice",
         "--a", str(tmp_path / "nope.avf"), "--b", str(tmp_path / "nope.avf"),
         "--label", "1"], capture_output=True, text=True)
    assert bad.returncode == 2
    assert json.loads(bad.stderr)["error"]["kind"] == "io"


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

def test_phantom_outputs(phantom_dir):
    for name in ("volume.avf", "labels.avf", "deformed.avf",
                 "deformed_labels.avf", "trajectories.json",
                 "fiducials.json", "image_to_arm.json", "arm_to_sens.json",
                 "sens_to_world.json", "meta.json"):
        assert (phantom_dir / name).exists(), name
    vol = load_volume(phantom_dir / "volume.avf")
    assert vol.dims == (48, 48, 24)
    labels = load_mask(phantom_dir / "labels.avf")
    assert labels.num_labels == 4
    with open(phantom_dir / "fiducials.json") as fh:
        assert len(json.load(fh)["fiducials_mm"]) == 4
    with open(phantom_dir / "trajectories.json") as fh:
        assert len(json.load(fh)) == 3


def test_phantom_meta_echoes_flags(phantom_dir):
    with open(phantom_dir / "meta.json") as fh:
        meta = json.load(fh)
    assert meta["command"] == "phantom"
    args = meta["arguments"]
    assert args["seed"] == 7
    assert args["deformed"] is True
    assert args["noise_sigma"] == 0.0


def test_phantom_deterministic_per_seed(tmp_path):
    dirs = [tmp_path / n for n in ("a", "b", "c")]
    for d, seed in zip(dirs, (3, 3, 4)):
        code, _, err = run_cli("phantom", "--out", d, "--seed", seed,
                               "--noise-sigma", 0.02)
        assert code == 0, err
    a, b, c = (load_volume(d / "volume.avf").data for d in dirs)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def test_preprocess_downsample_and_roi(phantom_dir, tmp_path):
    out = tmp_path / "pp"
    code, stdout, err = run_cli(
        "preprocess", "--input", phantom_dir / "volume.avf", "--out", out,
        "--downsample-factor", 2, "--align", "off",
        "--roi-threshold", 0.2, "--roi-seed", "8,12,6")
    assert code == 0, err
    assert json.loads(stdout)["dims"] == [24, 24, 12]
    vol = load_volume(out / "processed.avf")
    assert vol.dims == (24, 24, 12)
    assert vol.spacing == (2.0, 2.0, 2.0)
    roi = load_mask(out / "roi.avf")
    assert roi.data.sum() > 0
    assert (out / "meta.json").exists()


def test_preprocess_alignment_writes_offsets(phantom_dir, tmp_path):
    out = tmp_path / "pp"
    code, _, err = run_cli(
        "preprocess", "--input", phantom_dir / "volume.avf", "--out", out,
        "--align", "on", "--align-iterations", 5)
    assert code == 0, err
    with open(out / "slice_offsets.json") as fh:
        offsets = np.asarray(json.load(fh)["offsets_mm"])
    assert offsets.shape == (24, 2)
    # corrections never exceed the configured search clamp
    assert np.abs(offsets).max() <= 5.0
    assert (out / "processed.avf").exists()


def test_preprocess_output_feeds_register(phantom_dir, tmp_path):
    pp = tmp_path / "pp"
    code, _, _ = run_cli("preprocess", "--input", phantom_dir / "volume.avf",
                         "--out", pp, "--align", "off",
                         "--downsample-factor", 2)
    assert code == 0
    code, stdout, err = run_cli(
        "register", "--template", pp / "processed.avf",
        "--target", pp / "processed.avf", "--out", tmp_path / "reg",
        "--max-iterations", 2)
    assert code == 0, err
    assert (tmp_path / "reg" / "deformation.avf").exists()


# ---------------------------------------------------------------------------
# register + transfer
# ---------------------------------------------------------------------------

def test_register_artifacts(reg_dir):
    for name in ("deformation.avf", "deformation_inverse.avf", "warped.avf",
                 "loss.json", "loss.png", "jacobian.png", "meta.json"):
        assert (reg_dir / name).exists(), name
    with open(reg_dir / "loss.json") as fh:
        loss = json.load(fh)
    assert loss["converged"] is True
    total = [e["reg_term"] + e["sim_term"] for e in loss["loss"]]
    assert total[-1] < total[0]


def test_register_stdout_summary(phantom_dir, tmp_path):
    code, stdout, err = run_cli(
        "register", "--template", phantom_dir / "volume.avf",
        "--target", phantom_dir / "deformed.avf", "--out", tmp_path / "r",
        "--max-iterations", 2)
    assert code == 0, err
    summary = json.loads(stdout)
    assert summary["min_jacobian"] > 0.0
    assert summary["iterations"] >= 1
    with open(tmp_path / "r" / "meta.json") as fh:
        assert json.load(fh)["arguments"]["max_iterations"] == 2


def test_transfer_labels_reach_dice_target(reg_dir, phantom_dir, tmp_path):
    moved = tmp_path / "moved.json"
    warped = tmp_path / "warped.avf"
    code, _, err = run_cli(
        "transfer", "--result", reg_dir,
        "--trajectories", phantom_dir / "trajectories.json",
        "--out", moved, "--labels", phantom_dir / "labels.avf",
        "--warped-labels", warped)
    assert code == 0, err
    truth = load_mask(phantom_dir / "deformed_labels.avf")
    got = load_mask(warped)
    before = load_mask(phantom_dir / "labels.avf")
    for bone in (1, 2):
        initial = dice(before, truth, bone)
        final = dice(got, truth, bone)
        assert final >= 0.9, f"bone {bone}: {initial:.3f} -> {final:.3f}"
        assert final > initial


def test_transfer_moves_trajectories_with_the_tissue(reg_dir, phantom_dir,
                                                     tmp_path):
    moved_path = tmp_path / "moved.json"
    code, _, err = run_cli(
        "transfer", "--result", reg_dir,
        "--trajectories", phantom_dir / "trajectories.json",
        "--out", moved_path)
    assert code == 0, err
    with open(phantom_dir / "trajectories.json") as fh:
        orig = json.load(fh)
    with open(moved_path) as fh:
        moved = json.load(fh)
    assert len(moved) == len(orig) == 3
    shifts = []
    for a, b in zip(orig, moved):
        assert b["frame"] == "image"
        shifts.append(np.linalg.norm(np.subtract(b["end_mm"], a["end_mm"])))
    # the synthetic deformation peaks around 2.3 mm; endpoints should move,
    # but never wildly
    assert max(shifts) > 0.2
    assert max(shifts) < 5.0


def test_transfer_labels_flag_requires_output_path(reg_dir, phantom_dir,
                                                   tmp_path):
    code, _, err = run_cli(
        "transfer", "--result", reg_dir,
        "--trajectories", phantom_dir / "trajectories.json",
        "--out", tmp_path / "m.json", "--labels", phantom_dir / "labels.avf")
    assert code == 1
    assert "warped-labels" in stderr_error(err)["detail"]


# ---------------------------------------------------------------------------
# evaluate: dice
# ---------------------------------------------------------------------------

def test_evaluate_dice_prints_bare_scalar(phantom_dir):
    code, stdout, err = run_cli(
        "evaluate", "--mode", "dice", "--a", phantom_dir / "labels.avf",
        "--b", phantom_dir / "deformed_labels.avf", "--label", 1)
    assert code == 0, err
    value = json.loads(stdout)
    assert isinstance(value, float)
    expected = dice(load_mask(phantom_dir / "labels.avf"),
                    load_mask(phantom_dir / "deformed_labels.avf"), 1)
    assert value == expected


def test_evaluate_dice_csv(phantom_dir):
    code, stdout, _ = run_cli(
        "evaluate", "--mode", "dice", "--a", phantom_dir / "labels.avf",
        "--b", phantom_dir / "labels.avf", "--label", 2, "--format", "csv")
    assert code == 0
    header, row = stdout.strip().split("\n")
    assert header == "label,dice"
    assert row == "2,1.0"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_log_structure(sim_log):
    with open(sim_log) as fh:
        entries = [json.loads(line) for line in fh]
    assert entries[0]["type"] == "meta"
    assert len(entries[0]["trajectories_world"]) == 3
    assert all(t["frame"] == "world"
               for t in entries[0]["trajectories_world"])
    frames = [e for e in entries if e["type"] == "frame"]
    assert len(frames) == 3 * 12
    for e in frames[:3]:
        assert set(e["guidance"]) >= {"tip_error_mm", "mode",
                                      "depth_fraction"}
        assert set(e["two_ring"]) >= {"entry_ring_radius_mm",
                                      "end_ring_radius_mm"}
    insertions = [e for e in entries if e["type"] == "insertion"]
    assert [e["trajectory"] for e in insertions] == [0, 1, 2]
    landmarks = [e for e in entries if e["type"] == "landmark"]
    assert len(landmarks) == 4


def test_simulate_timestamps_increase(sim_log):
    with open(sim_log) as fh:
        entries = [json.loads(line) for line in fh]
    ts = [e["t"] for e in entries if e["type"] in ("frame", "landmark")]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_simulate_deterministic_per_seed(phantom_dir, tmp_path):
    paths = [tmp_path / n for n in ("a.jsonl", "b.jsonl", "c.jsonl")]
    for path, seed in zip(paths, (5, 5, 6)):
        code, _, err = run_cli(
            "simulate", "--scene", phantom_dir, "--out", path,
            "--seed", seed, "--noise-mm", 0.1,
            "--approach-frames", 4, "--insert-frames", 4)
        assert code == 0, err
    a, b, c = (p.read_bytes() for p in paths)
    assert a == b
    assert a != c


def test_simulate_guidance_mode_switches_near_the_path(sim_log):
    with open(sim_log) as fh:
        frames = [e for e in map(json.loads, fh) if e["type"] == "frame"]
    first = [e for e in frames if e["trajectory"] == 0]
    modes = [e["guidance"]["mode"] for e in first]
    # the approach starts 10 mm off axis and beyond the entry, and the
    # insertion runs on axis, so both coarse and fine modes appear
    assert "TipOnly" in modes
    assert "TipAndRotation" in modes
    assert modes[-1] == "TipAndRotation"


# ---------------------------------------------------------------------------
# evaluate: insertion + system error
# ---------------------------------------------------------------------------

def test_evaluate_insertion_zero_noise_is_exact(sim_log, tmp_path):
    figs = tmp_path / "figs"
    code, stdout, err = run_cli(
        "evaluate", "--mode", "insertion", "--log", sim_log,
        "--figures", figs)
    assert code == 0, err
    rows = json.loads(stdout)
    assert len(rows) == 3
    for row in rows:
        assert row["entry_error_mm"] < 1e-6
        assert row["end_error_mm"] == 0.0
    assert (figs / "insertion.png").exists()


def test_evaluate_insertion_csv(sim_log):
    code, stdout, _ = run_cli("evaluate", "--mode", "insertion",
                              "--log", sim_log, "--format", "csv")
    assert code == 0
    lines = stdout.strip().split("\n")
    assert lines[0] == "trajectory,entry_error_mm,end_error_mm"
    assert len(lines) == 4


def test_evaluate_system_error_zero_noise(sim_log, phantom_dir):
    code, stdout, err = run_cli(
        "evaluate", "--mode", "system-error", "--log", sim_log,
        "--landmarks", phantom_dir / "fiducials.json",
        "--image-to-arm", phantom_dir / "image_to_arm.json",
        "--arm-to-sens", phantom_dir / "arm_to_sens.json",
        "--sens-to-world", phantom_dir / "sens_to_world.json")
    assert code == 0, err
    report = json.loads(stdout)
    assert report["count"] == 4
    assert report["mean_mm"] <= 1e-6


def test_evaluate_system_error_with_noise(phantom_dir, tmp_path):
    log = tmp_path / "noisy.jsonl"
    code, _, err = run_cli(
        "simulate", "--scene", phantom_dir, "--out", log, "--seed", 2,
        "--noise-mm", 0.1, "--approach-frames", 3, "--insert-frames", 3,
        "--touch-landmarks")
    assert code == 0, err
    code, stdout, err = run_cli(
        "evaluate", "--mode", "system-error", "--log", log,
        "--landmarks", phantom_dir / "fiducials.json",
        "--image-to-arm", phantom_dir / "image_to_arm.json",
        "--arm-to-sens", phantom_dir / "arm_to_sens.json",
        "--sens-to-world", phantom_dir / "sens_to_world.json",
        "--format", "csv")
    assert code == 0, err
    lines = stdout.strip().split("\n")
    assert lines[0] == "landmark_id,error_mm"
    errors = [float(line.split(",")[1]) for line in lines[1:]]
    assert len(errors) == 4
    # 0.1 mm marker noise over a ~26 mm marker spread, amplified by the
    # 120 mm tip lever arm, lands around half a millimetre per touch
    assert all(0.0 < e < 2.0 for e in errors)
    assert float(np.mean(errors)) < 1.5


def test_evaluate_insertion_missing_log_is_validation_error():
    code, _, err = run_cli("evaluate", "--mode", "insertion")
    assert code == 1
    assert stderr_error(err)["kind"] == "validation"


# ---------------------------------------------------------------------------
# serve --replay
# ---------------------------------------------------------------------------

def _wire(msg_type, seq, payload):
    return json.dumps({"type": msg_type, "seq": seq, "payload": payload},
                      sort_keys=True, separators=(",", ":"))


def test_serve_replay_prints_deterministic_frames(phantom_dir, tmp_path):
    log = tmp_path / "in.jsonl"
    with open(log, "w") as fh:
        fh.write(json.dumps(
            {"dir": "in", "raw": _wire("hello", 0, {"version": 1})}) + "\n")
        fh.write(json.dumps({"dir": "in", "raw": "not json"}) + "\n")
        fh.write(json.dumps(
            {"dir": "in", "raw": _wire("next_trajectory", 1, {})}) + "\n")
    outs = []
    for _ in range(2):
        code, stdout, err = run_cli("serve", "--scene", phantom_dir,
                                    "--replay", log)
        assert code == 0, err
        outs.append(stdout)
    assert outs[0] == outs[1]
    types = [json.loads(line)["type"] for line in outs[0].splitlines()]
    assert types == ["hello", "scene", "error", "advance_ack", "scene"]


def test_serve_rejects_malformed_bind(phantom_dir):
    code, _, err = run_cli("serve", "--scene", phantom_dir,
                           "--bind", "nonsense")
    assert code == 1
    assert "host:port" in stderr_error(err)["detail"]
