import { describe, expect, it } from 'vitest';

import { ScriptedTransport, SessionClient } from '../src/session';
import { canonicalJson, decode, encode } from '../src/wire';
import { goldenLines } from './golden';

describe('canonical encoding', () => {
  it('sorts keys and drops whitespace', () => {
    expect(encode({ type: 'hello', seq: 0, payload: { b: 1, a: 2 } }))
      .toBe('{"payload":{"a":2,"b":1},"seq":0,"type":"hello"}');
  });

  it('sorts nested objects too', () => {
    expect(canonicalJson({ z: [1, 2, { b: null, a: true }], a: 'x"y' }))
      .toBe('{"a":"x\\"y","z":[1,2,{"a":true,"b":null}]}');
  });

  it('greets byte-identically to the recorded session', () => {
    const transport = new ScriptedTransport();
    new SessionClient(transport).sendHello();
    const recorded = goldenLines().find((l) => l.dir === 'in');
    expect(transport.sent[0]).toBe(recorded?.raw);
  });
});

describe('decode', () => {
  it('accepts every recorded frame', () => {
    const lines = goldenLines();
    expect(lines.length).toBe(40);
    for (const line of lines) {
      const msg = decode(line.raw);
      expect(msg.seq).toBeGreaterThanOrEqual(0);
      expect(typeof msg.payload).toBe('object');
    }
  });

  it('rejects malformed frames', () => {
    expect(() => decode('not json')).toThrow();
    expect(() => decode('[]')).toThrow();
    expect(() => decode('{"type":"nope","seq":0,"payload":{}}')).toThrow();
    expect(() => decode('{"type":"hello","seq":-1,"payload":{}}'))
      .toThrow();
    expect(() => decode('{"type":"hello","seq":0.5,"payload":{}}'))
      .toThrow();
    expect(() => decode('{"type":"hello","seq":0,"payload":[]}'))
      .toThrow();
    expect(() => decode('{"type":"hello","seq":0}')).toThrow();
  });
});

describe('sequencing', () => {
  it('numbers outbound frames from zero, strictly increasing', () => {
    const transport = new ScriptedTransport();
    const client = new SessionClient(transport);
    client.sendHello();
    client.sendPose(0.5, { r_quat: [1, 0, 0, 0], t_mm: [0, 0, 120] });
    client.sendAdjust(0, [1, 2, 3], null);
    client.sendAdjust(1, null, [4, 5, 6]);
    client.sendNext();
    const seqs = transport.sent.map((s) => decode(s).seq);
    expect(seqs).toEqual([0, 1, 2, 3, 4]);
  });

  it('sends adjust with only the endpoint being edited', () => {
    const transport = new ScriptedTransport();
    const client = new SessionClient(transport);
    client.sendAdjust(1, [5, 10, 14], null);
    const msg = decode(transport.sent[0]);
    expect(msg.type).toBe('adjust_trajectory');
    expect(msg.payload).toEqual({ entry_mm: [5, 10, 14], index: 1 });
  });

  it('drops duplicate and stale inbound frames', () => {
    const transport = new ScriptedTransport();
    const client = new SessionClient(transport);
    let sceneCalls = 0;
    client.onScene(() => { sceneCalls += 1; });
    const scene = goldenLines()
      .find((l) => l.dir === 'out' && decode(l.raw).type === 'scene');
    transport.deliver(scene!.raw);
    transport.deliver(scene!.raw);
    expect(sceneCalls).toBe(1);
  });

  it('survives garbage frames without dropping the session', () => {
    const transport = new ScriptedTransport();
    const client = new SessionClient(transport);
    client.handleRaw('{{{');
    client.handleRaw('{"type":"guidance","seq":"x","payload":{}}');
    expect(client.connected).toBe(true);
    const scene = goldenLines()
      .find((l) => l.dir === 'out' && decode(l.raw).type === 'scene');
    transport.deliver(scene!.raw);
    expect(client.scene).not.toBeNull();
  });
});
