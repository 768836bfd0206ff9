/** Builds three.js objects from a scene frame: one surface mesh per label,
 * a line plus entry/end handle spheres per planned trajectory. */

import * as THREE from 'three';

import { SceneMesh, ScenePayload, TrajectoryJson, Vec3 } from './wire.js';
import { GREEN } from './indicators.js';

const LABEL_COLORS = [0xbcbd22, 0x17becf, 0x9467bd, 0x8c564b, 0xe377c2];
const ACTIVE_COLOR = 0xff7f0e;
export const HANDLE_RADIUS_MM = 1.2;

function vec(v: Vec3): THREE.Vector3 {
  return new THREE.Vector3(v[0], v[1], v[2]);
}

function meshFromSurface(surface: SceneMesh): THREE.Mesh {
  const geometry = new THREE.BufferGeometry();
  const flat = new Float32Array(surface.vertices_mm.length * 3);
  surface.vertices_mm.forEach((v, i) => {
    flat[3 * i] = v[0];
    flat[3 * i + 1] = v[1];
    flat[3 * i + 2] = v[2];
  });
  geometry.setAttribute('position', new THREE.BufferAttribute(flat, 3));
  geometry.setIndex(surface.faces.flat());
  geometry.computeVertexNormals();
  const color = LABEL_COLORS[(surface.label - 1) % LABEL_COLORS.length];
  const mesh = new THREE.Mesh(
    geometry,
    new THREE.MeshLambertMaterial({
      color, transparent: true, opacity: 0.35, side: THREE.DoubleSide,
    }));
  mesh.userData.label = surface.label;
  return mesh;
}

export interface TrajectoryObjects {
  group: THREE.Group;
  line: THREE.Line;
  entryHandle: THREE.Mesh;
  endHandle: THREE.Mesh;
  trajectory: TrajectoryJson;
}

function buildTrajectory(t: TrajectoryJson, active: boolean):
    TrajectoryObjects {
  const group = new THREE.Group();
  const color = active ? ACTIVE_COLOR : GREEN;
  const line = new THREE.Line(
    new THREE.BufferGeometry().setFromPoints(
      [vec(t.entry_mm), vec(t.end_mm)]),
    new THREE.LineBasicMaterial({ color }));
  const handleMaterial = new THREE.MeshBasicMaterial({ color });
  const entryHandle = new THREE.Mesh(
    new THREE.SphereGeometry(HANDLE_RADIUS_MM, 12, 12), handleMaterial);
  entryHandle.position.copy(vec(t.entry_mm));
  entryHandle.userData.role = 'entry';
  const endHandle = new THREE.Mesh(
    new THREE.SphereGeometry(HANDLE_RADIUS_MM, 12, 12),
    handleMaterial.clone());
  endHandle.position.copy(vec(t.end_mm));
  endHandle.userData.role = 'end';
  group.add(line, entryHandle, endHandle);
  return { group, line, entryHandle, endHandle, trajectory: t };
}

/** Owns everything rebuilt on each scene frame.  Scene frames are rare
 * (connect and plan edits), so a full rebuild is simpler than diffing. */
export class SceneView {
  group = new THREE.Group();
  meshes: THREE.Mesh[] = [];
  trajectories: TrajectoryObjects[] = [];
  scene: ScenePayload | null = null;

  rebuild(scene: ScenePayload): void {
    this.scene = scene;
    this.group.clear();
    this.meshes = scene.meshes.map(meshFromSurface);
    for (const mesh of this.meshes) this.group.add(mesh);
    this.trajectories = scene.trajectories.map(
      (t, i) => buildTrajectory(t, i === scene.active_index));
    for (const t of this.trajectories) this.group.add(t.group);
  }

  activeTrajectory(): TrajectoryObjects | null {
    if (!this.scene) return null;
    return this.trajectories[this.scene.active_index] ?? null;
  }

  /** Handle under a pointer ray, nearest first, else null. */
  pickHandle(raycaster: THREE.Raycaster):
      { objects: TrajectoryObjects, index: number, role: string } | null {
    for (let i = 0; i < this.trajectories.length; i++) {
      const t = this.trajectories[i];
      const hits = raycaster.intersectObjects(
        [t.entryHandle, t.endHandle], false);
      if (hits.length > 0) {
        return {
          objects: t,
          index: i,
          role: hits[0].object.userData.role as string,
        };
      }
    }
    return null;
  }
}
