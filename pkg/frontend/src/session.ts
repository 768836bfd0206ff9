/** Session client: one socket, strictly increasing outbound sequence
 * numbers, and conflation of high-rate guidance frames so the render loop
 * only ever sees the latest. */

import {
  decode,
  encode,
  ErrorPayload,
  GuidancePayload,
  PROTOCOL_VERSION,
  RigidPoseJson,
  ScenePayload,
  TwoRingPayload,
  Vec3,
  WireMessage,
} from './wire.js';

/** Minimal socket surface so tests can drive the client without a network. */
export interface Transport {
  send(text: string): void;
  close(): void;
  onMessage(handler: (text: string) => void): void;
  onClose(handler: () => void): void;
}

export class WebSocketTransport implements Transport {
  private ws: WebSocket;

  constructor(url: string) {
    this.ws = new WebSocket(url);
  }

  send(text: string): void {
    this.ws.send(text);
  }

  close(): void {
    this.ws.close();
  }

  onMessage(handler: (text: string) => void): void {
    this.ws.addEventListener('message', (ev: MessageEvent) => {
      handler(typeof ev.data === 'string' ? ev.data : String(ev.data));
    });
  }

  onClose(handler: () => void): void {
    this.ws.addEventListener('close', handler);
  }

  onOpen(handler: () => void): void {
    this.ws.addEventListener('open', handler);
  }
}

/** Feeds recorded frames to the client by hand; collects everything it
 * sends.  Tests use this in place of a socket. */
export class ScriptedTransport implements Transport {
  sent: string[] = [];
  private messageHandler: ((text: string) => void) | null = null;
  private closeHandler: (() => void) | null = null;

  send(text: string): void {
    this.sent.push(text);
  }

  close(): void {
    if (this.closeHandler) this.closeHandler();
  }

  onMessage(handler: (text: string) => void): void {
    this.messageHandler = handler;
  }

  onClose(handler: () => void): void {
    this.closeHandler = handler;
  }

  deliver(text: string): void {
    if (this.messageHandler) this.messageHandler(text);
  }
}

export interface LatestFrames {
  guidance: GuidancePayload | null;
  twoRing: TwoRingPayload | null;
}

type SceneHandler = (scene: ScenePayload) => void;
type ErrorHandler = (err: ErrorPayload) => void;
type CloseHandler = () => void;

export class SessionClient {
  transport: Transport;
  scene: ScenePayload | null = null;
  connected = true;

  private outSeq = 0;
  private lastInSeq = -1;
  private latestGuidance: GuidancePayload | null = null;
  private latestTwoRing: TwoRingPayload | null = null;
  private sceneHandlers: SceneHandler[] = [];
  private errorHandlers: ErrorHandler[] = [];
  private closeHandlers: CloseHandler[] = [];

  constructor(transport: Transport) {
    this.transport = transport;
    transport.onMessage((text) => this.handleRaw(text));
    transport.onClose(() => {
      this.connected = false;
      for (const h of this.closeHandlers) h();
    });
  }

  onScene(handler: SceneHandler): void {
    this.sceneHandlers.push(handler);
  }

  onError(handler: ErrorHandler): void {
    this.errorHandlers.push(handler);
  }

  onClose(handler: CloseHandler): void {
    this.closeHandlers.push(handler);
  }

  handleRaw(text: string): void {
    let msg: WireMessage;
    try {
      msg = decode(text);
    } catch {
      return; // a broken frame never kills the session
    }
    if (msg.seq <= this.lastInSeq) return; // stale or duplicate
    this.lastInSeq = msg.seq;
    switch (msg.type) {
      case 'scene':
        this.scene = msg.payload as unknown as ScenePayload;
        for (const h of this.sceneHandlers) h(this.scene);
        break;
      case 'guidance':
        this.latestGuidance = msg.payload as unknown as GuidancePayload;
        break;
      case 'two_ring':
        this.latestTwoRing = msg.payload as unknown as TwoRingPayload;
        break;
      case 'advance_ack':
        break; // the scene frame that follows carries the new state
      case 'error':
        for (const h of this.errorHandlers) {
          h(msg.payload as unknown as ErrorPayload);
        }
        break;
      default:
        break;
    }
  }

  /** Hand the render loop the newest conflated frames and clear them;
   * called once per animation frame. */
  takeLatest(): LatestFrames {
    const frames = {
      guidance: this.latestGuidance,
      twoRing: this.latestTwoRing,
    };
    this.latestGuidance = null;
    this.latestTwoRing = null;
    return frames;
  }

  private send(type: WireMessage['type'],
               payload: Record<string, unknown>): void {
    const msg: WireMessage = { type, seq: this.outSeq, payload };
    this.outSeq += 1;
    this.transport.send(encode(msg));
  }

  sendHello(): void {
    this.send('hello', { version: PROTOCOL_VERSION });
  }

  sendPose(t: number, pose: RigidPoseJson): void {
    this.send('needle_pose', { t, pose });
  }

  sendAdjust(index: number, entry: Vec3 | null, end: Vec3 | null): void {
    const payload: Record<string, unknown> = { index };
    if (entry !== null) payload.entry_mm = entry;
    if (end !== null) payload.end_mm = end;
    this.send('adjust_trajectory', payload);
  }

  sendNext(): void {
    this.send('next_trajectory', {});
  }
}
