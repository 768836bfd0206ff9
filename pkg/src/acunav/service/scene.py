"""Scene bundle: the static data a guidance session serves.

A bundle directory holds the template volume, its label mask, the three
calibration transforms, and the reference trajectories.  Trajectories may
be stored in the image frame (the usual pipeline output) and are converted
to world coordinates on load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from ..rigid import (
    RigidTransform,
    apply,
    load_transform,
    solve_image_to_world,
    trajectory_to_world,
)
from ..volume import Mask3D, Volume3D, load_mask, load_volume
from ..warp import Trajectory, load_trajectories


@dataclass
class SceneBundle:
    volume: Volume3D
    labels: Mask3D
    image_to_arm: RigidTransform
    arm_to_sens: RigidTransform
    sens_to_world: RigidTransform
    trajectories: list

    def __post_init__(self):
        if self.volume.dims != self.labels.dims:
            raise ValueError("volume and label grids differ")
        if not self.trajectories:
            raise ValueError("scene needs at least one trajectory")
        frames = {t.frame for t in self.trajectories}
        if frames == {"image"}:
            chain = self.image_to_world
            self.trajectories = [trajectory_to_world(t, chain)
                                 for t in self.trajectories]
        elif frames != {"world"}:
            raise ValueError(
                f"trajectories must share the image or world frame, "
                f"got {sorted(frames)}")

    @property
    def image_to_world(self) -> RigidTransform:
        return solve_image_to_world(self.image_to_arm, self.arm_to_sens,
                                    self.sens_to_world)


def load_scene(bundle_dir) -> SceneBundle:
    d = Path(bundle_dir)
    return SceneBundle(
        load_volume(d / "volume.avf"),
        load_mask(d / "labels.avf"),
        load_transform(d / "image_to_arm.json"),
        load_transform(d / "arm_to_sens.json"),
        load_transform(d / "sens_to_world.json"),
        load_trajectories(d / "trajectories.json"))


def extract_meshes(bundle: SceneBundle) -> list[dict]:
    """Triangulated world-frame surface per label, for client rendering.

    Vertices are rounded to micrometer precision so the payload encodes
    identically across runs."""
    chain = bundle.image_to_world
    out = []
    for lab in range(1, bundle.labels.num_labels + 1):
        sel = (bundle.labels.data == lab).astype(np.float32)
        if sel.sum() == 0:
            continue
        verts, faces, _, _ = marching_cubes(sel, level=0.5,
                                            spacing=bundle.labels.spacing)
        world = np.round(apply(chain, verts), 3)
        out.append({"label": lab,
                    "vertices_mm": world.tolist(),
                    "faces": faces.astype(int).tolist()})
    return out
