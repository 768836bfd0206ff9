#!/usr/bin/env python3
"""Cross-runtime wire check.

Drives the compiled browser client through the reference pose script in
node, feeds the bytes it sends into the session engine, and verifies the
engine's replies are byte-identical to the recorded golden session.
Run `npm run build` first; the Python package must be importable.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from acunav.guidance import Trajectory
from acunav.rigid import RigidTransform
from acunav.service.engine import replay_log
from acunav.service.scene import SceneBundle
from acunav.volume import Mask3D, Volume3D

FRONTEND = Path(__file__).resolve().parents[1]

NODE_DRIVER = """
import {{ SessionClient, ScriptedTransport }} from '{dist}/session.js';
import {{ ViewState }} from '{dist}/viewState.js';

const transport = new ScriptedTransport();
const client = new SessionClient(transport);
const view = new ViewState();

client.sendHello();
view.needlePosition.set(25, 10, 14);
client.sendPose(0, view.poseJson());
view.needlePosition.set(10, 10, 14);
for (let k = 0; k < 9; k++) {{
  client.sendPose((k + 1) / 30, view.poseJson());
  view.needlePosition.z -= 1;
}}
client.sendAdjust(1, [5, 10, 14], null);
client.sendNext();
client.sendNext();
process.stdout.write(transport.sent.join('\\n') + '\\n');
"""


def golden_bundle() -> SceneBundle:
    """The scene the golden session was recorded against."""
    dims = (16, 16, 16)
    lab = np.zeros(dims, dtype=np.int32)
    lab[5:11, 5:11, 5:11] = 1
    lab[2:5, 2:5, 2:5] = 2
    ident = lambda: RigidTransform(np.eye(3), np.zeros(3))
    return SceneBundle(
        volume=Volume3D(dims, (1.0, 1.0, 1.0), np.zeros(dims)),
        labels=Mask3D(dims, (1.0, 1.0, 1.0), lab, num_labels=2),
        image_to_arm=ident(), arm_to_sens=ident(), sens_to_world=ident(),
        trajectories=[
            Trajectory("t0", "world",
                       np.array([10.0, 10.0, 14.0]),
                       np.array([10.0, 10.0, 6.0])),
            Trajectory("t1", "world",
                       np.array([4.0, 10.0, 14.0]),
                       np.array([6.0, 10.0, 6.0])),
        ])


def main() -> int:
    dist = FRONTEND / "dist"
    if not (dist / "session.js").exists():
        print("dist/ missing; run `npm run build` first", file=sys.stderr)
        return 2

    driver = NODE_DRIVER.format(dist=dist.as_posix())
    with tempfile.NamedTemporaryFile("w", suffix=".mjs",
                                     delete=False) as f:
        f.write(driver)
        driver_path = f.name
    proc = subprocess.run(["node", driver_path], capture_output=True,
                          text=True)
    if proc.returncode != 0:
        print(proc.stderr, file=sys.stderr)
        return 2
    client_lines = [l for l in proc.stdout.splitlines() if l.strip()]

    with tempfile.NamedTemporaryFile("w", suffix=".jsonl",
                                     delete=False) as f:
        for raw in client_lines:
            f.write(json.dumps({"dir": "in", "raw": raw}) + "\n")
        log_path = f.name

    out = replay_log(golden_bundle(), log_path, filter_enabled=False,
                     seed=0)
    golden_path = FRONTEND / "test" / "golden" / "session.jsonl"
    golden = [json.loads(l)["raw"] for l in open(golden_path)
              if json.loads(l)["dir"] == "out"]

    if len(out) != len(golden):
        print(f"frame count differs: engine {len(out)}, "
              f"golden {len(golden)}")
        return 1
    for i, (a, b) in enumerate(zip(out, golden)):
        if a != b:
            print(f"frame {i} differs:\n  engine: {a[:160]}\n"
                  f"  golden: {b[:160]}")
            return 1
    print(f"ok: {len(client_lines)} client frames in, "
          f"{len(out)} engine frames byte-identical to the golden log")
    return 0


if __name__ == "__main__":
    sys.exit(main())
