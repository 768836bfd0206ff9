/** Replays the recorded session through the real client and scene
 * objects and checks that what the UI shows is exactly what the service
 * sent: positions, radii, text, and raw readout values all come from the
 * frames, never from local computation. */

import { describe, expect, it } from 'vitest';

import { ScriptedTransport, SessionClient } from '../src/session';
import { IndicatorCluster, TwoRingView } from '../src/indicators';
import { SceneView } from '../src/sceneView';
import { Hud } from '../src/hud';
import { DEFAULT_SETTINGS } from '../src/viewState';
import {
  decode, GuidancePayload, ScenePayload, TwoRingPayload,
} from '../src/wire';
import { outLines } from './golden';

function setup() {
  const transport = new ScriptedTransport();
  const client = new SessionClient(transport);
  const settings = { ...DEFAULT_SETTINGS };
  const indicators = new IndicatorCluster(settings);
  const twoRing = new TwoRingView(settings);
  const sceneView = new SceneView();
  const hud = new Hud(document.createElement('div'), settings);
  client.onScene((scene) => {
    sceneView.rebuild(scene);
    const active = sceneView.activeTrajectory();
    if (active) {
      twoRing.setAnchors(
        active.trajectory.entry_mm, active.trajectory.end_mm);
    }
  });
  client.onError((e) => hud.showError(e));
  return { transport, client, indicators, twoRing, sceneView, hud };
}

function positionOf(obj: { position: { toArray(): number[] } }):
    number[] {
  return obj.position.toArray();
}

describe('golden session replay', () => {
  it('renders exactly the values carried by the frames', () => {
    const { transport, client, indicators, twoRing, sceneView, hud } =
      setup();
    let guidanceFrames = 0;
    let ringFrames = 0;
    let sawPlannedAnchor = false;
    let sawTipAnchor = false;
    let sawTipOnly = false;
    let sawFine = false;

    for (const raw of outLines()) {
      transport.deliver(raw);
      const frames = client.takeLatest();
      if (frames.guidance) {
        indicators.update(frames.guidance);
        hud.showGuidance(frames.guidance);
      }
      if (frames.twoRing) {
        twoRing.update(frames.twoRing);
        hud.showTwoRing(frames.twoRing);
      }

      const msg = decode(raw);
      if (msg.type === 'guidance') {
        guidanceFrames += 1;
        const g = msg.payload as unknown as GuidancePayload;
        expect(frames.guidance).toEqual(g);

        expect(positionOf(indicators.tipMarker)).toEqual(g.tip_world_mm);
        expect(positionOf(indicators.targetSphere))
          .toEqual(g.projection_point_mm);

        const anchor = g.depth_fraction > 0
          ? g.tip_world_mm : g.projection_point_mm;
        expect(positionOf(indicators.cross)).toEqual(anchor);
        if (g.depth_fraction > 0) sawTipAnchor = true;
        else sawPlannedAnchor = true;

        const fine = g.mode === 'TipAndRotation';
        if (fine) sawFine = true;
        else sawTipOnly = true;
        expect(indicators.rotationSphere.visible).toBe(fine);
        expect(indicators.degreeText.visible).toBe(fine);
        expect(indicators.degreeText.userData.text)
          .toBe(`${g.rotation_error_deg.toFixed(1)}°`);

        expect(hud.lastGuidanceRaw).toEqual(g);
        expect(hud.readout.textContent)
          .toContain(`tip error ${g.tip_error_mm.toFixed(2)} mm`);
        expect(hud.readout.textContent).toContain(`mode ${g.mode}`);
      } else if (msg.type === 'two_ring') {
        ringFrames += 1;
        const r = msg.payload as unknown as TwoRingPayload;
        expect(frames.twoRing).toEqual(r);

        // scale carries the served radius; a torus cannot collapse to
        // zero so the degenerate case clamps visually
        expect(twoRing.entryRing.scale.x)
          .toBe(Math.max(r.entry_ring_radius_mm, 1e-3));
        expect(twoRing.endRing.scale.x)
          .toBe(Math.max(r.end_ring_radius_mm, 1e-3));

        const active = sceneView.activeTrajectory();
        expect(positionOf(twoRing.entryRing))
          .toEqual(active?.trajectory.entry_mm);
        expect(positionOf(twoRing.endRing))
          .toEqual(active?.trajectory.end_mm);

        expect(hud.lastTwoRingRaw).toEqual(r);
      } else if (msg.type === 'scene') {
        const s = msg.payload as unknown as ScenePayload;
        expect(client.scene).toEqual(s);
        expect(sceneView.trajectories.length)
          .toBe(s.trajectories.length);
        expect(sceneView.meshes.length).toBe(s.meshes.length);
        for (let i = 0; i < s.meshes.length; i++) {
          const count = sceneView.meshes[i].geometry
            .getAttribute('position').count;
          expect(count).toBe(s.meshes[i].vertices_mm.length);
        }
        for (let i = 0; i < s.trajectories.length; i++) {
          const t = sceneView.trajectories[i];
          expect(positionOf(t.entryHandle))
            .toEqual(s.trajectories[i].entry_mm);
          expect(positionOf(t.endHandle))
            .toEqual(s.trajectories[i].end_mm);
        }
      }
    }

    expect(guidanceFrames).toBe(10);
    expect(ringFrames).toBe(10);
    expect(sawPlannedAnchor).toBe(true);
    expect(sawTipAnchor).toBe(true);
    expect(sawTipOnly).toBe(true);
    expect(sawFine).toBe(true);

    // the plan edit and the advance both arrived via scene frames
    expect(sceneView.scene?.active_index).toBe(1);
    expect(sceneView.trajectories[1].trajectory.entry_mm)
      .toEqual([5, 10, 14]);

    // the final next_trajectory was refused
    expect(hud.toastBox.children.length).toBe(1);
    expect(hud.toastBox.children[0].textContent)
      .toContain('no_more_trajectories');
  });

  it('recorded approach only ever deepens', () => {
    const depths = outLines()
      .map((raw) => decode(raw))
      .filter((m) => m.type === 'guidance')
      .map((m) => (m.payload as unknown as GuidancePayload)
        .depth_fraction);
    expect(depths[0]).toBe(0);
    expect(depths[depths.length - 1]).toBe(1);
    for (let i = 1; i < depths.length; i++) {
      expect(depths[i]).toBeGreaterThanOrEqual(depths[i - 1]);
    }
  });

  it('draws the off-axis hint toward the needle line', () => {
    const { transport, client, twoRing } = setup();
    const lines = outLines();
    // scene first so the rings know their anchors, then the one frame
    // recorded with the needle 15 mm off axis
    transport.deliver(lines[1]);
    transport.deliver(lines[2]);
    transport.deliver(lines[3]);
    const frames = client.takeLatest();
    expect(frames.twoRing).not.toBeNull();
    twoRing.update(frames.twoRing!);

    // trajectory runs along -z through (10,10); the needle stood at
    // x=25, so the served 2-vector [0,1] must map to world +x
    const positions = twoRing.entryHint.geometry
      .getAttribute('position');
    expect([positions.getX(0), positions.getY(0), positions.getZ(0)])
      .toEqual([10, 10, 14]);
    expect([positions.getX(1), positions.getY(1), positions.getZ(1)])
      .toEqual([25, 10, 14]);
  });

  it('conflates frames between render turns to the newest', () => {
    const { transport, client } = setup();
    const guidanceRaws = outLines()
      .filter((raw) => decode(raw).type === 'guidance');
    transport.deliver(guidanceRaws[0]);
    transport.deliver(guidanceRaws[1]);
    const frames = client.takeLatest();
    const last = decode(guidanceRaws[1])
      .payload as unknown as GuidancePayload;
    expect(frames.guidance).toEqual(last);
    const again = client.takeLatest();
    expect(again.guidance).toBeNull();
    expect(again.twoRing).toBeNull();
  });

  it('shows ring radii in the readout when toggled over', () => {
    const { transport, client, hud } = setup();
    const lines = outLines();
    transport.deliver(lines[1]);
    transport.deliver(lines[3]);
    const frames = client.takeLatest();
    hud.setUiMode('two_ring');
    hud.showTwoRing(frames.twoRing!);
    expect(hud.readout.textContent).toContain('entry ring 15.00 mm');
    expect(hud.readout.textContent).toContain('end ring 15.00 mm');
  });
});
