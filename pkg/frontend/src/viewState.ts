/** Client-side view state.  The needle pose here is what the user drives;
 * every guidance number displayed comes back from the server. */

import * as THREE from 'three';

import { RigidPoseJson } from './wire.js';

export type UiMode = 'mruct' | 'two_ring';

/** Needle tip offset in the tool frame; must match the service's tool
 * geometry or every tip position would be translated. */
export const TIP_IN_TOOL: [number, number, number] = [0, 0, -120];

export interface IndicatorSettings {
  crossSizeMm: number;
  targetSphereRadiusMm: number;
  rotationSphereRadiusMm: number;
  projectionLineLengthMm: number;
  ringTubeRadiusMm: number;
}

export const DEFAULT_SETTINGS: IndicatorSettings = {
  crossSizeMm: 3.0,
  targetSphereRadiusMm: 1.5,
  rotationSphereRadiusMm: 1.0,
  projectionLineLengthMm: 25.0,
  ringTubeRadiusMm: 0.15,
};

export class ViewState {
  mode: UiMode = 'mruct';
  settings: IndicatorSettings;
  needlePosition = new THREE.Vector3(0, 0, 0);
  private needleAxis = new THREE.Vector3(0, 0, -1);

  constructor(settings: IndicatorSettings = { ...DEFAULT_SETTINGS }) {
    this.settings = settings;
  }

  get axis(): THREE.Vector3 {
    return this.needleAxis.clone();
  }

  setAxis(axis: THREE.Vector3): void {
    const n = axis.clone();
    if (n.lengthSq() < 1e-12) return; // ignore degenerate input
    this.needleAxis = n.normalize();
  }

  /** Rotation matrix rows for the tool frame whose -z axis is the needle
   * direction, serialized the way the service expects poses. */
  toolRotation(): number[][] {
    const zAxis = this.needleAxis.clone().multiplyScalar(-1);
    // (0,1,0) keeps the default downward needle at the identity rotation
    let helper = new THREE.Vector3(0, 1, 0);
    if (Math.abs(zAxis.dot(helper)) > 0.9) helper = new THREE.Vector3(1, 0, 0);
    const xAxis = new THREE.Vector3().crossVectors(helper, zAxis).normalize();
    const yAxis = new THREE.Vector3().crossVectors(zAxis, xAxis);
    return [
      [xAxis.x, yAxis.x, zAxis.x],
      [xAxis.y, yAxis.y, zAxis.y],
      [xAxis.z, yAxis.z, zAxis.z],
    ];
  }

  /** Tool pose for the wire: translation places the tip lever arm so the
   * physical tip lands at needlePosition. */
  poseJson(): RigidPoseJson {
    const r = this.toolRotation();
    const [tx, ty, tz] = TIP_IN_TOOL;
    const lever = [
      r[0][0] * tx + r[0][1] * ty + r[0][2] * tz,
      r[1][0] * tx + r[1][1] * ty + r[1][2] * tz,
      r[2][0] * tx + r[2][1] * ty + r[2][2] * tz,
    ];
    const m = new THREE.Matrix4().set(
      r[0][0], r[0][1], r[0][2], 0,
      r[1][0], r[1][1], r[1][2], 0,
      r[2][0], r[2][1], r[2][2], 0,
      0, 0, 0, 1);
    const q = new THREE.Quaternion().setFromRotationMatrix(m);
    const sign = q.w < 0 ? -1 : 1; // one canonical hemisphere
    const p = this.needlePosition;
    return {
      r_quat: [sign * q.w, sign * q.x, sign * q.y, sign * q.z],
      t_mm: [p.x - lever[0], p.y - lever[1], p.z - lever[2]],
    };
  }
}
