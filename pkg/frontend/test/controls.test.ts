import { describe, expect, it } from 'vitest';
import * as THREE from 'three';

import { Controls } from '../src/controls';
import { ScriptedTransport, SessionClient } from '../src/session';
import { SceneView } from '../src/sceneView';
import { DEFAULT_SETTINGS, ViewState } from '../src/viewState';
import { decode, ScenePayload } from '../src/wire';
import { outLines } from './golden';

function rig() {
  const transport = new ScriptedTransport();
  const client = new SessionClient(transport);
  const view = new ViewState({ ...DEFAULT_SETTINGS });
  const sceneView = new SceneView();
  const scene = decode(outLines()[1]).payload as unknown as ScenePayload;
  sceneView.rebuild(scene);
  const camera = new THREE.PerspectiveCamera();
  camera.updateMatrixWorld();
  const dom = document.createElement('div');
  let clock = 0;
  const controls = new Controls(
    dom, camera, view, sceneView, client, () => clock);
  const sentOfType = (type: string) => transport.sent
    .map((s) => decode(s))
    .filter((m) => m.type === type);
  return {
    transport, client, view, sceneView, controls, sentOfType,
    tick: (ms: number) => { clock += ms; },
  };
}

describe('pose input', () => {
  it('throttles pose frames to the display rate', () => {
    const { controls, sentOfType, tick } = rig();
    for (let i = 0; i < 50; i++) controls.moveNeedle(1, 0);
    expect(sentOfType('needle_pose').length).toBe(1);
    tick(17);
    for (let i = 0; i < 50; i++) controls.moveNeedle(1, 0);
    expect(sentOfType('needle_pose').length).toBe(2);
    tick(5); // still inside the same frame budget
    controls.moveNeedle(1, 0);
    expect(sentOfType('needle_pose').length).toBe(2);
    tick(17);
    controls.moveNeedle(1, 0);
    expect(sentOfType('needle_pose').length).toBe(3);
  });

  it('maps drag pixels to camera-plane millimetres', () => {
    const { controls, view } = rig();
    // default camera looks down -z: right is +x, up is +y
    controls.moveNeedle(4, 2);
    expect(view.needlePosition.x).toBe(1);
    expect(view.needlePosition.y).toBe(-0.5);
    expect(view.needlePosition.z).toBe(0);
  });

  it('advances along the needle axis on wheel input', () => {
    const { controls, view } = rig();
    controls.advance(100); // 5 mm along the default (0,0,-1) axis
    expect(view.needlePosition.z).toBe(-5);
    expect(view.needlePosition.x).toBe(0);
  });

  it('keeps the axis unit length through reorientation', () => {
    const { controls, view, sentOfType, tick } = rig();
    tick(20);
    controls.reorient(40, 25);
    const axis = view.axis;
    expect(Math.abs(axis.length() - 1)).toBeLessThan(1e-12);
    expect(axis.z).not.toBe(-1);
    expect(sentOfType('needle_pose').length).toBe(1);
    const pose = sentOfType('needle_pose')[0]
      .payload as { pose: { r_quat: number[] } };
    const norm = Math.hypot(...pose.pose.r_quat);
    expect(Math.abs(norm - 1)).toBeLessThan(1e-12);
  });
});

describe('plan editing', () => {
  it('sends exactly one adjustment per completed drag', () => {
    const { controls, sceneView, sentOfType } = rig();
    const t1 = sceneView.trajectories[1];
    controls.beginHandleDrag(t1, 1, 'entry');
    for (let i = 0; i < 10; i++) controls.moveHandle(2, 0);
    controls.moveHandle(0, 4);
    controls.endHandleDrag();

    const adjusts = sentOfType('adjust_trajectory');
    expect(adjusts.length).toBe(1);
    expect(adjusts[0].payload).toEqual({
      index: 1,
      entry_mm: [4 + 10 * 0.5, 10 - 1, 14],
    });
    expect(Object.keys(adjusts[0].payload)).not.toContain('end_mm');
  });

  it('sends nothing for a drag that never moved', () => {
    const { controls, sceneView, sentOfType } = rig();
    controls.beginHandleDrag(sceneView.trajectories[0], 0, 'end');
    controls.endHandleDrag();
    expect(sentOfType('adjust_trajectory').length).toBe(0);
  });

  it('edits the end point through the end handle', () => {
    const { controls, sceneView, sentOfType } = rig();
    controls.beginHandleDrag(sceneView.trajectories[0], 0, 'end');
    controls.moveHandle(-4, 0);
    controls.endHandleDrag();
    const adjusts = sentOfType('adjust_trajectory');
    expect(adjusts.length).toBe(1);
    expect(adjusts[0].payload).toEqual({
      index: 0,
      end_mm: [10 - 1, 10, 6],
    });
  });

  it('requests the next trajectory on demand', () => {
    const { client, sentOfType } = rig();
    client.sendNext();
    const next = sentOfType('next_trajectory');
    expect(next.length).toBe(1);
    expect(next[0].payload).toEqual({});
  });
});
