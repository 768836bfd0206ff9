/** Wire protocol shared with the session service: JSON frames with
 * canonical key order so recorded sessions replay byte-for-byte. */

export const PROTOCOL_VERSION = 1;

export type Vec3 = [number, number, number];
export type Vec2 = [number, number];
export type Quat = [number, number, number, number];

export type MessageType =
  | 'hello'
  | 'scene'
  | 'needle_pose'
  | 'guidance'
  | 'two_ring'
  | 'adjust_trajectory'
  | 'next_trajectory'
  | 'advance_ack'
  | 'error'
  | 'session_log';

export interface WireMessage {
  type: MessageType;
  seq: number;
  payload: Record<string, unknown>;
}

export interface GuidancePayload {
  tip_world_mm: Vec3;
  projection_point_mm: Vec3;
  tip_error_mm: number;
  rotation_error_deg: number;
  mode: 'TipOnly' | 'TipAndRotation';
  depth_fraction: number;
  t: number;
  pose_seq: number;
}

/** Direction hints are unit 2-vectors in each ring's plane, expressed in
 * the session's deterministic in-plane basis; zero marks on-axis. */
export interface TwoRingPayload {
  entry_ring_radius_mm: number;
  end_ring_radius_mm: number;
  entry_dir_hint: Vec2;
  end_dir_hint: Vec2;
  t: number;
  pose_seq: number;
}

export interface SceneMesh {
  label: number;
  vertices_mm: Vec3[];
  faces: [number, number, number][];
}

export interface TrajectoryJson {
  name: string;
  frame: string;
  entry_mm: Vec3;
  end_mm: Vec3;
}

export interface ScenePayload {
  dims: [number, number, number];
  spacing_mm: Vec3;
  trajectories: TrajectoryJson[];
  active_index: number;
  activation_radius_mm: number;
  optimal_radius_mm: number;
  mode: string;
  meshes: SceneMesh[];
}

export interface ErrorPayload {
  code: string;
  detail: string;
  ref_seq: number | null;
}

/** Rigid pose as sent on the wire: rotation quaternion in [w, x, y, z]
 * order plus translation.  The service renormalizes the quaternion. */
export interface RigidPoseJson {
  r_quat: Quat;
  t_mm: Vec3;
}

const TYPES = new Set<string>([
  'hello', 'scene', 'needle_pose', 'guidance', 'two_ring',
  'adjust_trajectory', 'next_trajectory', 'advance_ack', 'error',
  'session_log',
]);

/** Serialize with sorted keys and no whitespace, matching the server's
 * canonical form, so identical messages are identical bytes. */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value === 'number' ||
      typeof value === 'boolean') {
    return JSON.stringify(value);
  }
  if (typeof value === 'string') return JSON.stringify(value);
  if (Array.isArray(value)) {
    return '[' + value.map(canonicalJson).join(',') + ']';
  }
  if (typeof value === 'object') {
    const obj = value as Record<string, unknown>;
    const keys = Object.keys(obj).sort();
    const parts = keys.map(
      (k) => JSON.stringify(k) + ':' + canonicalJson(obj[k]),
    );
    return '{' + parts.join(',') + '}';
  }
  throw new Error(`cannot serialize ${typeof value}`);
}

export function encode(msg: WireMessage): string {
  return canonicalJson({ type: msg.type, seq: msg.seq, payload: msg.payload });
}

export function decode(text: string): WireMessage {
  let obj: unknown;
  try {
    obj = JSON.parse(text);
  } catch {
    throw new Error('frame is not valid JSON');
  }
  if (typeof obj !== 'object' || obj === null || Array.isArray(obj)) {
    throw new Error('frame must be a JSON object');
  }
  const m = obj as Record<string, unknown>;
  if (typeof m.type !== 'string' || !TYPES.has(m.type)) {
    throw new Error(`unknown message type ${JSON.stringify(m.type)}`);
  }
  if (typeof m.seq !== 'number' || !Number.isInteger(m.seq) || m.seq < 0) {
    throw new Error('seq must be a non-negative integer');
  }
  if (typeof m.payload !== 'object' || m.payload === null ||
      Array.isArray(m.payload)) {
    throw new Error('payload must be an object');
  }
  return {
    type: m.type as MessageType,
    seq: m.seq,
    payload: m.payload as Record<string, unknown>,
  };
}
