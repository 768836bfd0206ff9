/** Browser entry point.  Wires the session client, scene graph, HUD and
 * controls together and runs the render loop.  Kept free of logic worth
 * unit testing; nothing imports this module.
 */

import * as THREE from 'three';

import { SessionClient, WebSocketTransport } from './session.js';
import { ViewState, DEFAULT_SETTINGS } from './viewState.js';
import { SceneView } from './sceneView.js';
import { IndicatorCluster, TwoRingView, RED } from './indicators.js';
import { Hud } from './hud.js';
import { Controls } from './controls.js';

const RECONNECT_MS = 2000;

function serverUrl(): string {
  const params = new URLSearchParams(window.location.search);
  const given = params.get('server');
  if (given) return given;
  const host = window.location.host || 'localhost:8765';
  return `ws://${host}/`;
}

function main(): void {
  const container = document.getElementById('app');
  if (!container) throw new Error('missing #app container');

  const scene = new THREE.Scene();
  scene.background = new THREE.Color(0x10141a);
  const camera = new THREE.PerspectiveCamera(
    50, window.innerWidth / window.innerHeight, 0.1, 2000);
  camera.position.set(90, -130, 110);
  camera.up.set(0, 0, 1);
  camera.lookAt(24, 24, 12);

  const renderer = new THREE.WebGLRenderer({ antialias: true });
  renderer.setSize(window.innerWidth, window.innerHeight);
  container.appendChild(renderer.domElement);
  window.addEventListener('resize', () => {
    camera.aspect = window.innerWidth / window.innerHeight;
    camera.updateProjectionMatrix();
    renderer.setSize(window.innerWidth, window.innerHeight);
  });

  scene.add(new THREE.AmbientLight(0xffffff, 0.7));
  const key = new THREE.DirectionalLight(0xffffff, 0.8);
  key.position.set(1, -1, 2);
  scene.add(key);

  const settings = { ...DEFAULT_SETTINGS };
  const view = new ViewState(settings);
  const sceneView = new SceneView();
  scene.add(sceneView.group);
  const indicators = new IndicatorCluster(settings);
  scene.add(indicators.group);
  const twoRing = new TwoRingView(settings);
  twoRing.group.visible = false;
  scene.add(twoRing.group);

  // local needle model: where the user is pointing, driven by input only
  const needleGeometry = new THREE.BufferGeometry().setFromPoints(
    [new THREE.Vector3(), new THREE.Vector3()]);
  const needle = new THREE.Line(
    needleGeometry, new THREE.LineBasicMaterial({ color: RED }));
  scene.add(needle);
  view.needlePosition.set(24, 24, 40);

  const hud = new Hud(document.body, settings);

  const applyScene = (payload: import('./wire.js').ScenePayload) => {
    sceneView.rebuild(payload);
    const active = sceneView.activeTrajectory();
    if (active) {
      twoRing.setAnchors(
        active.trajectory.entry_mm, active.trajectory.end_mm);
    }
  };

  let client: SessionClient | null = null;
  let controls: Controls | null = null;

  const connect = () => {
    const transport = new WebSocketTransport(serverUrl());
    const c = new SessionClient(transport);
    c.onScene(applyScene);
    c.onError((e) => hud.showError(e));
    c.onClose(() => {
      hud.setConnected(false);
      setTimeout(connect, RECONNECT_MS);
    });
    transport.onOpen(() => {
      hud.setConnected(true);
      c.sendHello();
    });
    client = c;
    if (controls) controls.client = c;
    else {
      controls = new Controls(
        renderer.domElement, camera, view, sceneView, c);
    }
  };
  connect();

  hud.onModeToggle = () => {
    // visualization switch only: the session is not told
    indicators.group.visible = hud.uiMode === 'mruct';
    twoRing.group.visible = hud.uiMode === 'two_ring';
  };
  hud.onNext = () => client?.sendNext();

  renderer.setAnimationLoop(() => {
    if (client) {
      const frames = client.takeLatest();
      if (frames.guidance) {
        indicators.update(frames.guidance);
        hud.showGuidance(frames.guidance);
      }
      if (frames.twoRing) {
        twoRing.update(frames.twoRing);
        hud.showTwoRing(frames.twoRing);
      }
    }
    const tip = view.needlePosition;
    const tail = tip.clone().addScaledVector(view.axis, -60);
    const positions = needleGeometry.getAttribute('position');
    positions.setXYZ(0, tail.x, tail.y, tail.z);
    positions.setXYZ(1, tip.x, tip.y, tip.z);
    positions.needsUpdate = true;
    renderer.render(scene, camera);
  });
}

main();
