/** Input handling.  Gesture logic lives in plain methods so it can run
 * without real pointer events; the DOM listeners only translate events
 * into those calls.
 *
 * Pose updates are throttled to the display rate.  A trajectory handle
 * drag accumulates locally and sends exactly one plan adjustment when the
 * pointer is released, so the server log stays one line per edit.
 */

import * as THREE from 'three';

import { SessionClient } from './session.js';
import { ViewState } from './viewState.js';
import { SceneView, TrajectoryObjects } from './sceneView.js';
import { Vec3 } from './wire.js';

const MIN_POSE_INTERVAL_MS = 1000 / 60;
const DRAG_MM_PER_PX = 0.25;
const WHEEL_MM_PER_STEP = 0.05;
const REORIENT_RAD_PER_PX = 0.005;

type Gesture = 'none' | 'move' | 'reorient' | 'handle';

interface HandleGrab {
  objects: TrajectoryObjects;
  index: number;
  role: string;
  moved: boolean;
}

export class Controls {
  poseSends = 0;
  adjustSends = 0;

  private t0: number;
  private lastPoseAt = -Infinity;
  private gesture: Gesture = 'none';
  private grab: HandleGrab | null = null;
  private raycaster = new THREE.Raycaster();
  private pointer = new THREE.Vector2();

  constructor(
    private dom: HTMLElement,
    private camera: THREE.Camera,
    private view: ViewState,
    private sceneView: SceneView,
    public client: SessionClient,
    private now: () => number = () => Date.now(),
  ) {
    this.t0 = this.now();
    this.bind();
  }

  /** Seconds since the controls came up; the pose timestamp. */
  sessionTime(): number {
    return (this.now() - this.t0) / 1000;
  }

  private cameraAxes(): { right: THREE.Vector3, up: THREE.Vector3 } {
    const right = new THREE.Vector3();
    const up = new THREE.Vector3();
    this.camera.matrixWorld.extractBasis(right, up, new THREE.Vector3());
    return { right, up };
  }

  private maybeSendPose(): void {
    const t = this.now();
    if (t - this.lastPoseAt < MIN_POSE_INTERVAL_MS) return;
    this.lastPoseAt = t;
    this.client.sendPose(this.sessionTime(), this.view.poseJson());
    this.poseSends += 1;
  }

  /** Lateral needle translation in the camera plane. */
  moveNeedle(dxPx: number, dyPx: number): void {
    const { right, up } = this.cameraAxes();
    this.view.needlePosition
      .addScaledVector(right, dxPx * DRAG_MM_PER_PX)
      .addScaledVector(up, -dyPx * DRAG_MM_PER_PX);
    this.maybeSendPose();
  }

  /** Advance or withdraw along the needle axis. */
  advance(wheelDelta: number): void {
    this.view.needlePosition.addScaledVector(
      this.view.axis, wheelDelta * WHEEL_MM_PER_STEP);
    this.maybeSendPose();
  }

  /** Tilt the needle axis; the tip stays put. */
  reorient(dxPx: number, dyPx: number): void {
    const { right, up } = this.cameraAxes();
    const axis = this.view.axis;
    axis.applyAxisAngle(up, -dxPx * REORIENT_RAD_PER_PX);
    axis.applyAxisAngle(right, -dyPx * REORIENT_RAD_PER_PX);
    this.view.setAxis(axis);
    this.maybeSendPose();
  }

  beginHandleDrag(
      objects: TrajectoryObjects, index: number, role: string): void {
    this.gesture = 'handle';
    this.grab = { objects, index, role, moved: false };
  }

  moveHandle(dxPx: number, dyPx: number): void {
    if (!this.grab) return;
    const { right, up } = this.cameraAxes();
    const handle = this.grab.role === 'entry'
      ? this.grab.objects.entryHandle : this.grab.objects.endHandle;
    handle.position
      .addScaledVector(right, dxPx * DRAG_MM_PER_PX)
      .addScaledVector(up, -dyPx * DRAG_MM_PER_PX);
    this.grab.moved = true;
  }

  endHandleDrag(): void {
    const grab = this.grab;
    this.gesture = 'none';
    this.grab = null;
    if (!grab || !grab.moved) return;
    const handle = grab.role === 'entry'
      ? grab.objects.entryHandle : grab.objects.endHandle;
    const p: Vec3 = [handle.position.x, handle.position.y,
                     handle.position.z];
    this.client.sendAdjust(
      grab.index,
      grab.role === 'entry' ? p : null,
      grab.role === 'end' ? p : null);
    this.adjustSends += 1;
  }

  private toPointer(event: { clientX: number, clientY: number }): void {
    const rect = this.dom.getBoundingClientRect();
    const w = rect.width || 1;
    const h = rect.height || 1;
    this.pointer.set(
      ((event.clientX - rect.left) / w) * 2 - 1,
      -((event.clientY - rect.top) / h) * 2 + 1);
  }

  private bind(): void {
    let lastX = 0;
    let lastY = 0;

    this.dom.addEventListener('pointerdown', (event: PointerEvent) => {
      lastX = event.clientX;
      lastY = event.clientY;
      this.toPointer(event);
      this.raycaster.setFromCamera(this.pointer, this.camera);
      const pick = this.sceneView.pickHandle(this.raycaster);
      if (pick) {
        this.beginHandleDrag(pick.objects, pick.index, pick.role);
      } else {
        this.gesture = event.shiftKey ? 'reorient' : 'move';
      }
      this.dom.setPointerCapture?.(event.pointerId);
    });

    this.dom.addEventListener('pointermove', (event: PointerEvent) => {
      const dx = event.clientX - lastX;
      const dy = event.clientY - lastY;
      lastX = event.clientX;
      lastY = event.clientY;
      if (this.gesture === 'move') this.moveNeedle(dx, dy);
      else if (this.gesture === 'reorient') this.reorient(dx, dy);
      else if (this.gesture === 'handle') this.moveHandle(dx, dy);
    });

    const finish = () => {
      if (this.gesture === 'handle') this.endHandleDrag();
      this.gesture = 'none';
    };
    this.dom.addEventListener('pointerup', finish);
    this.dom.addEventListener('pointercancel', finish);

    this.dom.addEventListener('wheel', (event: WheelEvent) => {
      event.preventDefault();
      this.advance(-event.deltaY);
    }, { passive: false });
  }
}
