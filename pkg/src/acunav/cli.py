"""Pipeline driver: phantom generation, preprocessing, registration,
trajectory transfer, scripted insertion simulation, evaluation, and the
streaming guidance service.

Every subcommand is deterministic given its input files, flags, and seed;
stochastic commands require an explicit --seed.  Validation failures exit
with code 1 and I/O failures with code 2, both printing a machine-readable
JSON object on stderr.  Commands that write a directory also write a
meta.json echoing every resolved flag value.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .guidance import GuidanceSession, advance, compute_guidance, compute_two_ring
from .metrics import ErrorReport, dice, end_to_end_error, insertion_errors
from .phantom import default_arm_spec, default_chain, gen_phantom
from .registration import (
    RegistrationConfig,
    RegistrationError,
    jacobian_determinant,
    load_deformation,
    register,
    save_result,
)
from .rigid import (
    RigidTransform,
    apply,
    compose,
    identity,
    invert,
    load_transform,
    needle_to_world,
    rotation_about,
    save_transform,
    solve_image_to_world,
)
from .tracking import (
    NEEDLE_AXIS_IN_TOOL,
    NEEDLE_TIP_IN_TOOL,
    KalmanConfig,
    KalmanState,
    PoseObservation,
    kalman_step,
    observations_to_pose,
    standard_markers,
)
from .volume import (
    AlignConfig,
    align_slices,
    downsample,
    extract_roi,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)
from .warp import Trajectory, load_trajectories, save_trajectories, transfer_trajectory, warp_mask


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind


def _fail(kind: str, detail: str, code: int) -> "NoReturn":
    sys.stderr.write(json.dumps({"error": {"kind": kind, "detail": detail}})
                     + "\n")
    raise SystemExit(code)


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures: JSON on stderr, exit 1."""

    def error(self, message):
        _fail("validation", message, 1)


def _write_meta(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    skip = {"func", "command"}
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        resolved[key] = str(value) if isinstance(value, Path) else value
    with open(out_dir / "meta.json", "w") as fh:
        json.dump({"command": command, "version": __version__,
                   "arguments": resolved}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_fiducials(path) -> np.ndarray:
    with open(path) as fh:
        obj = json.load(fh)
    pts = obj["fiducials_mm"] if isinstance(obj, dict) else obj
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{path}: expected (n, 3) fiducial positions")
    return arr


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    spec = default_arm_spec(deformed=args.deformed)
    spec.noise_sigma = args.noise_sigma
    ph = gen_phantom(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(ph.volume, out / "volume.avf")
    save_mask(ph.labels, out / "labels.avf")
    if ph.deformed_volume is not None:
        save_volume(ph.deformed_volume, out / "deformed.avf")
        save_mask(ph.deformed_labels, out / "deformed_labels.avf")
    save_trajectories(ph.trajectories, out / "trajectories.json")
    with open(out / "fiducials.json", "w") as fh:
        json.dump({"fiducials_mm": ph.fiducials_mm.tolist()}, fh, indent=2)
    for name, t in zip(("image_to_arm", "arm_to_sens", "sens_to_world"),
                       default_chain()):
        save_transform(t, out / f"{name}.json")
    _write_meta(out, "phantom", args)
    print(json.dumps({"out": str(out), "deformed": args.deformed,
                      "labels": int(ph.labels.num_labels)}))
    return 0


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def _cmd_preprocess(args) -> int:
    vol = load_volume(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.downsample_factor > 1:
        f = args.downsample_factor
        vol = downsample(vol, (f, f, f))
    if args.align == "on":
        config = AlignConfig(max_offset_mm=args.max_offset_mm,
                             iterations=args.align_iterations)
        vol, offsets = align_slices(vol, config)
        with open(out / "slice_offsets.json", "w") as fh:
            json.dump({"offsets_mm": offsets.offsets_mm.tolist()}, fh)
    save_volume(vol, out / "processed.avf")
    if args.roi_threshold is not None:
        seed = None
        if args.roi_seed is not None:
            parts = args.roi_seed.split(",")
            if len(parts) != 3:
                raise CliError("validation",
                               "--roi-seed must be three comma-separated "
                               "voxel indices, e.g. 16,24,12")
            seed = tuple(int(p) for p in parts)
        roi = extract_roi(vol, args.roi_threshold, seed=seed)
        save_mask(roi, out / "roi.avf")
    _write_meta(out, "preprocess", args)
    print(json.dumps({"out": str(out), "dims": list(vol.dims)}))
    return 0


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def _cmd_register(args) -> int:
    template = load_volume(args.template)
    target = load_volume(args.target)
    config = RegistrationConfig(
        timesteps=args.timesteps, max_iterations=args.max_iterations,
        step_size=args.step_size, alpha=args.alpha, gamma=args.gamma,
        kernel_passes=args.kernel_passes,
        similarity_weight=args.similarity_weight, tolerance=args.tolerance)
    result = register(template, target, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_result(result, out)

    from .report import render_jacobian_slice, render_loss_curves
    with open(out / "loss.json") as fh:
        render_loss_curves(json.load(fh)["loss"], out / "loss.png")
    jac = jacobian_determinant(result.forward)
    render_jacobian_slice(jac, out / "jacobian.png")
    _write_meta(out, "register", args)
    print(json.dumps({"out": str(out), "converged": result.converged,
                      "iterations": len(result.loss_history),
                      "min_jacobian": float(jac.data.min())}))
    return 0


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def _cmd_transfer(args) -> int:
    result_dir = Path(args.result)
    trajectories = load_trajectories(args.trajectories)
    forward = load_deformation(result_dir / "deformation.avf")
    moved = [transfer_trajectory(forward, t) for t in trajectories]
    save_trajectories(moved, args.out)
    extra = {}
    if args.labels is not None:
        if args.warped_labels is None:
            raise CliError("validation",
                           "--labels requires --warped-labels for the output")
        backward = load_deformation(result_dir / "deformation_inverse.avf")
        warped = warp_mask(backward, load_mask(args.labels))
        save_mask(warped, args.warped_labels)
        extra["warped_labels"] = str(args.warped_labels)
    print(json.dumps({"out": str(args.out),
                      "trajectories": len(moved), **extra}))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _rotation_aligning(a, b) -> np.ndarray:
    """Rotation matrix taking unit vector a to unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.cross(a, b)
    d = float(np.dot(a, b))
    if d > 1.0 - 1e-12:
        return np.eye(3)
    if d < -1.0 + 1e-12:
        helper = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        perp = np.cross(a, helper)
        perp /= np.linalg.norm(perp)
        return rotation_about(perp, np.pi).rotation
    return rotation_about(c, float(np.arctan2(np.linalg.norm(c), d))).rotation


def _perp_offset(direction: np.ndarray) -> np.ndarray:
    helper = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(direction, helper)) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    perp = np.cross(helper, direction)
    return perp / np.linalg.norm(perp)


class _NeedleSim:
    """Drives a simulated tracked needle to requested world positions."""

    def __init__(self, sens_to_world, noise_mm, rng, use_filter):
        self.geometry = standard_markers("needle")
        self.sens_to_world = sens_to_world
        self.noise_mm = noise_mm
        self.rng = rng
        self.use_filter = use_filter
        self.state = None

    def measure(self, t, tip_world, axis_world):
        """Place the tool so the true tip is at tip_world, then observe it
        through noisy markers (and the filter when enabled)."""
        rot = _rotation_aligning(NEEDLE_AXIS_IN_TOOL, axis_world)
        trans = np.asarray(tip_world) - rot @ np.asarray(NEEDLE_TIP_IN_TOOL)
        chain = RigidTransform(rot, trans)  # tool -> world
        tool_to_sens = compose(invert(self.sens_to_world), chain)
        markers = apply(tool_to_sens, self.geometry.points_mm)
        markers = markers + self.rng.normal(0.0, 1.0,
                                            markers.shape) * self.noise_mm
        fitted = observations_to_pose(self.geometry, markers)
        if self.use_filter:
            if self.state is None:
                self.state = KalmanState.from_pose(fitted, t)
            else:
                self.state, fitted = kalman_step(
                    self.state, PoseObservation(t, "needle", None, fitted))
        return needle_to_world(NEEDLE_TIP_IN_TOOL, NEEDLE_AXIS_IN_TOOL,
                               fitted, self.sens_to_world)


def _cmd_simulate(args) -> int:
    from .service import load_scene

    scene = load_scene(args.scene)
    rng = np.random.default_rng(args.seed)
    sim = _NeedleSim(scene.sens_to_world, args.noise_mm, rng,
                     args.filter == "on")
    session = GuidanceSession(list(scene.trajectories))
    dt = 1.0 / args.rate_hz
    lines = []
    meta = {"type": "meta", "command": "simulate", "seed": args.seed,
            "noise_mm": args.noise_mm, "rate_hz": args.rate_hz,
            "approach_frames": args.approach_frames,
            "insert_frames": args.insert_frames, "filter": args.filter,
            "optimal_radius_mm": args.optimal_radius_mm,
            "trajectories_world": [t.to_json() for t in scene.trajectories]}
    lines.append(meta)

    frame = 0
    for idx, traj in enumerate(scene.trajectories):
        sim.state = None  # the tool is re-acquired for each insertion
        u = traj.direction
        start = traj.entry + 10.0 * _perp_offset(u) - 8.0 * u
        path = [start + (traj.entry - start) * (k + 1) / args.approach_frames
                for k in range(args.approach_frames)]
        path += [traj.entry + (traj.end - traj.entry) * (k + 1)
                 / args.insert_frames for k in range(args.insert_frames)]
        entry_meas = None
        tip_meas = None
        for k, tip_true in enumerate(path):
            t = frame * dt
            frame += 1
            tip_meas, axis_meas = sim.measure(t, tip_true, u)
            state = compute_guidance(session, tip_meas, axis_meas)
            rings = compute_two_ring(session, tip_meas, axis_meas)
            if k == args.approach_frames - 1:
                entry_meas = tip_meas
            lines.append({"type": "frame", "trajectory": idx, "t": t,
                          "tip_true_mm": np.asarray(tip_true).tolist(),
                          "tip_meas_mm": np.asarray(tip_meas).tolist(),
                          "guidance": state.to_json(),
                          "two_ring": rings.to_json()})
        lines.append({"type": "insertion", "trajectory": idx,
                      "name": traj.name,
                      "inserted": {"entry_mm": entry_meas.tolist(),
                                   "end_mm": tip_meas.tolist()}})
        if idx + 1 < len(scene.trajectories):
            advance(session)

    if args.touch_landmarks:
        fiducials = _load_fiducials(Path(args.scene) / "fiducials.json")
        chain = scene.image_to_world
        meta["landmarks_image_mm"] = fiducials.tolist()
        sim_raw = _NeedleSim(scene.sens_to_world, args.noise_mm, rng,
                             use_filter=False)
        for k, f in enumerate(fiducials):
            t = frame * dt
            frame += 1
            tip_true = apply(chain, f)
            tip_meas, _ = sim_raw.measure(t, tip_true, (0.0, 0.0, -1.0))
            lines.append({"type": "landmark", "index": k, "t": t,
                          "tip_world_mm": tip_meas.tolist()})

    with open(args.out, "w") as fh:
        for entry in lines:
            fh.write(json.dumps(entry) + "\n")
    print(json.dumps({"out": str(args.out), "frames": frame,
                      "trajectories": len(scene.trajectories)}))
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _read_log(path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def _eval_dice(args) -> str:
    value = dice(load_mask(args.a), load_mask(args.b), args.label)
    if args.format == "csv":
        return f"label,dice\n{args.label},{value!r}\n"
    return json.dumps(value)


def _eval_system_error(args):
    if args.landmarks is None:
        raise CliError("validation", "system-error needs --landmarks")
    landmarks = _load_fiducials(args.landmarks)
    if args.tips is not None:
        with open(args.tips) as fh:
            tips = np.asarray(json.load(fh), dtype=np.float64)
    elif args.log is not None:
        records = [e for e in _read_log(args.log) if e["type"] == "landmark"]
        if not records:
            raise CliError("validation",
                           "log has no landmark records; run simulate with "
                           "--touch-landmarks")
        records.sort(key=lambda e: e["index"])
        tips = np.asarray([e["tip_world_mm"] for e in records])
    else:
        raise CliError("validation", "system-error needs --tips or --log")
    chain = [load_transform(p) for p in (args.image_to_arm, args.arm_to_sens,
                                         args.sens_to_world)]
    report = end_to_end_error(landmarks, tips, *chain)
    if args.figures is not None:
        from .report import render_error_report
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        render_error_report(report, fig_dir / "system_error.png",
                            title="end-to-end system error")
    if args.format == "csv":
        return report.to_csv()
    return json.dumps(report.to_json())


def _eval_insertion(args):
    if args.log is None:
        raise CliError("validation", "insertion needs --log")
    entries = _read_log(args.log)
    meta = next((e for e in entries if e["type"] == "meta"), None)
    if meta is None or "trajectories_world" not in meta:
        raise CliError("validation", "log lacks the reference trajectories")
    truth = {i: Trajectory.from_json(t)
             for i, t in enumerate(meta["trajectories_world"])}
    rows = []
    for e in entries:
        if e["type"] != "insertion":
            continue
        ins = Trajectory(e["name"], "world", e["inserted"]["entry_mm"],
                         e["inserted"]["end_mm"])
        entry_err, end_err = insertion_errors(ins, truth[e["trajectory"]],
                                              args.optimal_radius_mm)
        rows.append((e["name"], entry_err, end_err))
    if not rows:
        raise CliError("validation", "log has no insertion records")
    if args.figures is not None:
        from .report import render_insertion_summary
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        render_insertion_summary(rows, fig_dir / "insertion.png")
    if args.format == "csv":
        lines = ["trajectory,entry_error_mm,end_error_mm"]
        lines += [f"{n},{a!r},{b!r}" for n, a, b in rows]
        return "\n".join(lines) + "\n"
    return json.dumps([{"trajectory": n, "entry_error_mm": a,
                        "end_error_mm": b} for n, a, b in rows])


def _cmd_evaluate(args) -> int:
    if args.mode == "dice":
        out = _eval_dice(args)
    elif args.mode == "system-error":
        out = _eval_system_error(args)
    else:
        out = _eval_insertion(args)
    sys.stdout.write(out if out.endswith("\n") else out + "\n")
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def _cmd_serve(args) -> int:
    from .service import load_scene, replay_log
    from .service.server import start_server

    scene = load_scene(args.scene)
    if args.replay is not None:
        for line in replay_log(scene, args.replay,
                               filter_enabled=args.filter == "on",
                               seed=args.seed):
            print(line)
        return 0

    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise CliError("validation",
                       f"--bind must look like host:port, got '{args.bind}'")

    async def _run():
        server, gs, actual = await start_server(
            scene, host=host, port=int(port),
            filter_enabled=args.filter == "on", seed=args.seed,
            record_path=args.record)
        print(json.dumps({"listening": f"{host}:{actual}"}), flush=True)
        try:
            await server.serve_forever()
        finally:
            gs.close()

    asyncio.run(_run())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="acunav",
                     description="Ultrasound-to-guidance pipeline tools")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic scan bundle")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--deformed", action="store_true",
                   help="also emit an analytically deformed second volume")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("preprocess", help="downsample, align, extract ROI")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--downsample-factor", type=int, default=1)
    p.add_argument("--align", choices=("on", "off"), default="on")
    p.add_argument("--max-offset-mm", type=float, default=5.0)
    p.add_argument("--align-iterations", type=int, default=50)
    p.add_argument("--roi-threshold", type=float, default=None)
    p.add_argument("--roi-seed", default=None,
                   help="voxel index i,j,k inside the region of interest; "
                        "defaults to the volume center")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("register", help="deformable volume registration")
    p.add_argument("--template", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--timesteps", type=int, default=10)
    p.add_argument("--max-iterations", type=int, default=150)
    p.add_argument("--step-size", type=float, default=300.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--kernel-passes", type=int, default=2)
    p.add_argument("--similarity-weight", type=float, default=1e4)
    p.add_argument("--tolerance", type=float, default=1e-7)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("transfer",
                       help="map trajectories (and labels) through a "
                            "registration result")
    p.add_argument("--result", type=Path, required=True,
                   help="directory written by register")
    p.add_argument("--trajectories", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None)
    p.add_argument("--warped-labels", type=Path, default=None)
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("simulate",
                       help="scripted needle session over a scene bundle")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise-mm", type=float, default=0.0)
    p.add_argument("--rate-hz", type=float, default=30.0)
    p.add_argument("--approach-frames", type=int, default=30)
    p.add_argument("--insert-frames", type=int, default=30)
    p.add_argument("--filter", choices=("on", "off"), default="on")
    p.add_argument("--optimal-radius-mm", type=float, default=1.5)
    p.add_argument("--touch-landmarks", action="store_true",
                   help="also visit each fiducial and record the measured "
                        "tip position")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("evaluate", help="compute metrics from artifacts")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--mode", choices=("dice", "system-error", "insertion"),
                   required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--figures", type=Path, default=None,
                   help="directory for rendered figure files")
    p.add_argument("--a", type=Path, default=None)
    p.add_argument("--b", type=Path, default=None)
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--log", type=Path, default=None)
    p.add_argument("--tips", type=Path, default=None)
    p.add_argument("--landmarks", type=Path, default=None)
    p.add_argument("--image-to-arm", type=Path, default=None)
    p.add_argument("--arm-to-sens", type=Path, default=None)
    p.add_argument("--sens-to-world", type=Path, default=None)
    p.add_argument("--optimal-radius-mm", type=float, default=1.5)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("serve", help="host a guidance session")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--bind", default="127.0.0.1:8765")
    p.add_argument("--record", type=Path, default=None)
    p.add_argument("--replay", type=Path, default=None)
    p.add_argument("--filter", choices=("on", "off"), default="on")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _fail(exc.kind, str(exc), 1 if exc.kind == "validation" else 2)
    except RegistrationError as exc:
        _fail("validation", str(exc), 1)
    except ValueError as exc:
        _fail("validation", str(exc), 1)
    except OSError as exc:
        _fail("io", str(exc), 2)


if __name__ == "__main__":
    raise SystemExit(main())
