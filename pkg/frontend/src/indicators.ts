/** 3D guidance indicators.  Every number shown here is taken verbatim from
 * the latest server frame: nothing is recomputed client-side.
 *
 * Red/green scheme throughout for contrast: red marks the needle and its
 * corrections, green marks the planned path.
 */

import * as THREE from 'three';

import { GuidancePayload, TwoRingPayload, Vec2, Vec3 } from './wire.js';
import { IndicatorSettings } from './viewState.js';

export const RED = 0xd62728;
export const GREEN = 0x2ca02c;

function vec(v: Vec3): THREE.Vector3 {
  return new THREE.Vector3(v[0], v[1], v[2]);
}

/** Flat cross with a central circle, lying in the xy plane of its group. */
function buildCross(sizeMm: number, color: number): THREE.Group {
  const group = new THREE.Group();
  const material = new THREE.LineBasicMaterial({ color });
  const s = sizeMm;
  const arms = new THREE.BufferGeometry().setFromPoints([
    new THREE.Vector3(-s, 0, 0), new THREE.Vector3(s, 0, 0),
    new THREE.Vector3(0, -s, 0), new THREE.Vector3(0, s, 0),
  ]);
  group.add(new THREE.LineSegments(arms, material));
  const circlePoints: THREE.Vector3[] = [];
  for (let i = 0; i <= 32; i++) {
    const a = (i / 32) * Math.PI * 2;
    circlePoints.push(
      new THREE.Vector3(Math.cos(a) * s * 0.4, Math.sin(a) * s * 0.4, 0));
  }
  const circle = new THREE.BufferGeometry().setFromPoints(circlePoints);
  group.add(new THREE.Line(circle, material));
  return group;
}

function textSprite(text: string): THREE.Sprite {
  // Billboarding comes free with sprites; the canvas texture only exists
  // in a real browser, so tests read .userData.text instead of pixels.
  // OffscreenCanvas presence separates browsers from the DOM shim used
  // under test, which has canvas elements but cannot rasterize.
  const material = new THREE.SpriteMaterial({ color: RED });
  if (typeof document !== 'undefined' &&
      typeof OffscreenCanvas !== 'undefined') {
    const canvas = document.createElement('canvas');
    canvas.width = 256;
    canvas.height = 64;
    const ctx = canvas.getContext('2d');
    if (ctx) {
      ctx.fillStyle = '#d62728';
      ctx.font = '48px sans-serif';
      ctx.textAlign = 'center';
      ctx.textBaseline = 'middle';
      ctx.fillText(text, 128, 32);
      material.map = new THREE.CanvasTexture(canvas);
      material.color.set(0xffffff);
    }
  }
  const sprite = new THREE.Sprite(material);
  sprite.scale.set(12, 3, 1);
  sprite.userData.text = text;
  return sprite;
}

/** Tip indicator, projection line, target sphere, rotation sphere, and the
 * billboarded degree text.  The cluster anchors at the projection point
 * while the needle approaches and rides the tip once insertion starts. */
export class IndicatorCluster {
  group = new THREE.Group();
  tipMarker: THREE.Mesh;
  cross: THREE.Group;
  projectionLine: THREE.Line;
  targetSphere: THREE.Mesh;
  rotationSphere: THREE.Mesh;
  degreeText: THREE.Sprite;
  lastGuidance: GuidancePayload | null = null;

  private settings: IndicatorSettings;

  constructor(settings: IndicatorSettings) {
    this.settings = settings;

    this.tipMarker = new THREE.Mesh(
      new THREE.SphereGeometry(0.6, 12, 12),
      new THREE.MeshBasicMaterial({ color: RED }));
    this.group.add(this.tipMarker);

    this.cross = buildCross(settings.crossSizeMm, RED);
    this.group.add(this.cross);

    const lineGeometry = new THREE.BufferGeometry().setFromPoints([
      new THREE.Vector3(), new THREE.Vector3(),
    ]);
    this.projectionLine = new THREE.Line(
      lineGeometry, new THREE.LineBasicMaterial({ color: GREEN }));
    this.group.add(this.projectionLine);

    this.targetSphere = new THREE.Mesh(
      new THREE.SphereGeometry(settings.targetSphereRadiusMm, 16, 16),
      new THREE.MeshBasicMaterial({
        color: GREEN, transparent: true, opacity: 0.75,
      }));
    this.group.add(this.targetSphere);

    this.rotationSphere = new THREE.Mesh(
      new THREE.SphereGeometry(settings.rotationSphereRadiusMm, 16, 16),
      new THREE.MeshBasicMaterial({ color: RED }));
    this.group.add(this.rotationSphere);

    this.degreeText = textSprite('');
    this.group.add(this.degreeText);
  }

  update(g: GuidancePayload): void {
    this.lastGuidance = g;
    const tip = vec(g.tip_world_mm);
    const target = vec(g.projection_point_mm);

    // visibility aid for the ultrathin needle: always mark the tip in red
    this.tipMarker.position.copy(tip);

    // attention-adaptive anchor: before insertion the cluster sits at the
    // planned point; once depth grows it follows the tip
    const anchor = g.depth_fraction > 0 ? tip : target;
    this.cross.position.copy(anchor);

    const L = this.settings.projectionLineLengthMm;
    const positions = this.projectionLine.geometry.getAttribute('position');
    positions.setXYZ(0, target.x, target.y, target.z + L);
    positions.setXYZ(1, target.x, target.y, target.z);
    positions.needsUpdate = true;

    this.targetSphere.position.copy(target);

    const fine = g.mode === 'TipAndRotation';
    this.rotationSphere.visible = fine;
    this.degreeText.visible = fine;
    this.rotationSphere.position.copy(anchor);
    const label = `${g.rotation_error_deg.toFixed(1)}°`;
    if (this.degreeText.userData.text !== label) {
      this.group.remove(this.degreeText);
      const visible = this.degreeText.visible;
      this.degreeText = textSprite(label);
      this.degreeText.visible = visible;
      this.group.add(this.degreeText);
    }
    this.degreeText.position.set(target.x, target.y, target.z + 6);
  }
}

function buildRing(tubeRadiusMm: number): THREE.Mesh {
  return new THREE.Mesh(
    new THREE.TorusGeometry(1.0, tubeRadiusMm, 8, 48),
    new THREE.MeshBasicMaterial({ color: GREEN }));
}

/** Baseline display: a ring at each of the entry and end points whose
 * radius is the needle-line distance, with a red in-plane direction line. */
export class TwoRingView {
  group = new THREE.Group();
  entryRing: THREE.Mesh;
  endRing: THREE.Mesh;
  entryHint: THREE.Line;
  endHint: THREE.Line;
  lastTwoRing: TwoRingPayload | null = null;

  private entry = new THREE.Vector3();
  private end = new THREE.Vector3();
  // in-plane basis; must mirror the session's convention so 2D hints
  // land in the right world direction
  private e1 = new THREE.Vector3(1, 0, 0);
  private e2 = new THREE.Vector3(0, 1, 0);

  constructor(settings: IndicatorSettings) {
    this.entryRing = buildRing(settings.ringTubeRadiusMm);
    this.endRing = buildRing(settings.ringTubeRadiusMm);
    const hintMaterial = new THREE.LineBasicMaterial({ color: RED });
    this.entryHint = new THREE.Line(
      new THREE.BufferGeometry().setFromPoints([
        new THREE.Vector3(), new THREE.Vector3()]),
      hintMaterial);
    this.endHint = new THREE.Line(
      new THREE.BufferGeometry().setFromPoints([
        new THREE.Vector3(), new THREE.Vector3()]),
      hintMaterial.clone());
    this.group.add(this.entryRing, this.endRing, this.entryHint,
                   this.endHint);
  }

  setAnchors(entry: Vec3, end: Vec3): void {
    this.entry = vec(entry);
    this.end = vec(end);
    this.entryRing.position.copy(this.entry);
    this.endRing.position.copy(this.end);
    // ring planes face along the planned path; torus normal starts at +z
    const axis = this.end.clone().sub(this.entry);
    if (axis.lengthSq() > 1e-12) {
      axis.normalize();
      const q = new THREE.Quaternion().setFromUnitVectors(
        new THREE.Vector3(0, 0, 1), axis);
      this.entryRing.quaternion.copy(q);
      this.endRing.quaternion.copy(q);
      let helper = new THREE.Vector3(0, 0, 1);
      if (Math.abs(axis.dot(helper)) > 0.9) {
        helper = new THREE.Vector3(1, 0, 0);
      }
      this.e1 = new THREE.Vector3().crossVectors(helper, axis).normalize();
      this.e2 = new THREE.Vector3().crossVectors(axis, this.e1);
    }
  }

  update(r: TwoRingPayload): void {
    this.lastTwoRing = r;
    // a torus cannot have zero major radius; collapse visually instead
    const entryScale = Math.max(r.entry_ring_radius_mm, 1e-3);
    const endScale = Math.max(r.end_ring_radius_mm, 1e-3);
    this.entryRing.scale.set(entryScale, entryScale, 1);
    this.endRing.scale.set(endScale, endScale, 1);

    for (const [line, anchor, hint, radius] of [
      [this.entryHint, this.entry, r.entry_dir_hint,
       r.entry_ring_radius_mm],
      [this.endHint, this.end, r.end_dir_hint, r.end_ring_radius_mm],
    ] as [THREE.Line, THREE.Vector3, Vec2, number][]) {
      const dir = this.e1.clone().multiplyScalar(hint[0])
        .addScaledVector(this.e2, hint[1]);
      const positions = line.geometry.getAttribute('position');
      positions.setXYZ(0, anchor.x, anchor.y, anchor.z);
      positions.setXYZ(
        1,
        anchor.x + dir.x * radius,
        anchor.y + dir.y * radius,
        anchor.z + dir.z * radius);
      positions.needsUpdate = true;
    }
  }
}
