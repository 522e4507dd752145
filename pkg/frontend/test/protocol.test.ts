import { describe, expect, it } from 'vitest';

import {
  FrameSplitter, ProtocolError, commandFrame, encodeFrame, parseFrame,
} from '../src/protocol.js';
import type { Frame } from '../src/protocol.js';

const CRASH_LINE = JSON.stringify({
  v: 1, kind: 'CRASH', session: 's1', seq: 1,
  body: {
    program: 'p1', activation: 'a1', exception: 'ValueError', message: 'boom',
    cell: 'c2', path: [['loop-body', 0]],
    frames: [{ cell: 'c2', line: 3, unit: 'cell', statement: 'x = f(y)' }],
    variables: { y: '7' }, traceback: 'Traceback...', generation: 0,
    timestamp: 1.5,
  },
});

const RESUMED_LINE = JSON.stringify({
  v: 1, kind: 'RESUMED', session: 's1', seq: 4, body: { status: 'resumed' },
});

function mutated(line: string, patch: Record<string, unknown>): string {
  return JSON.stringify({ ...JSON.parse(line), ...patch });
}

describe('frame validation', () => {
  it('accepts a well-formed crash', () => {
    const frame = parseFrame(CRASH_LINE);
    expect(frame.kind).toBe('CRASH');
    expect(frame.seq).toBe(1);
  });

  const rejects: [string, string][] = [
    ['version', mutated(CRASH_LINE, { v: 2 })],
    ['kind', mutated(CRASH_LINE, { kind: 'PANIC' })],
    ['missing session', mutated(CRASH_LINE, { session: '' })],
    ['zero seq', mutated(CRASH_LINE, { seq: 0 })],
    ['fractional seq', mutated(CRASH_LINE, { seq: 1.5 })],
    ['boolean seq', mutated(CRASH_LINE, { seq: true })],
    ['array body', mutated(CRASH_LINE, { body: [1, 2] })],
    ['not json at all', '{"v": 1,'],
    ['top-level array', '[1, 2, 3]'],
  ];
  for (const [label, line] of rejects) {
    it(`rejects a bad ${label}`, () => {
      expect(() => parseFrame(line)).toThrow(ProtocolError);
    });
  }

  it('checks crash body fields', () => {
    const body = JSON.parse(CRASH_LINE).body;
    expect(() => parseFrame(mutated(CRASH_LINE,
      { body: { ...body, frames: [{ cell: 'c2' }] } }))).toThrow(ProtocolError);
    expect(() => parseFrame(mutated(CRASH_LINE,
      { body: { ...body, variables: { y: 7 } } }))).toThrow(ProtocolError);
    expect(() => parseFrame(mutated(CRASH_LINE,
      { body: { ...body, path: [['loop-body']] } }))).toThrow(ProtocolError);
    expect(() => parseFrame(mutated(CRASH_LINE,
      { body: { ...body, generation: 'x' } }))).toThrow(ProtocolError);
  });

  it('checks command bodies like the server does', () => {
    const cmd = (body: unknown): string => JSON.stringify(
      { v: 1, kind: 'COMMAND', session: 's1', seq: 2, body });
    expect(parseFrame(cmd({ kind: 'pass', payload: null })).kind).toBe('COMMAND');
    expect(() => parseFrame(cmd({ kind: 'poke', payload: null })))
      .toThrow(/unknown command kind/);
    expect(() => parseFrame(cmd({ kind: 'action', payload: 42 })))
      .toThrow(/payload must be text/);
  });

  it('checks result, state, resumed and workers bodies', () => {
    const at = (kind: string, body: unknown): string => JSON.stringify(
      { v: 1, kind, session: 's1', seq: 2, body });
    expect(() => parseFrame(at('RESULT', { ok: 'yes', detail: 'x' })))
      .toThrow(ProtocolError);
    expect(() => parseFrame(at('STATE', { status: 'paused' })))
      .toThrow(ProtocolError);
    expect(() => parseFrame(at('RESUMED', { status: 'done' })))
      .toThrow(ProtocolError);
    expect(() => parseFrame(at('WORKERS', { workers: [{ id: 'w0' }] })))
      .toThrow(ProtocolError);
    expect(parseFrame(at('WORKERS', { workers: [] })).kind).toBe('WORKERS');
  });
});

describe('encoding', () => {
  it('emits exactly one line per frame', () => {
    const text = encodeFrame(parseFrame(CRASH_LINE));
    expect(text.endsWith('\n')).toBe(true);
    expect(text.slice(0, -1)).not.toContain('\n');
  });

  it('builds command frames with the payload rules', () => {
    const frame = commandFrame('s1', 2, 'surgery', 'def f():\n    pass\n');
    expect(frame.body.payload).toContain('def f()');
    expect(commandFrame('s1', 3, 'pass').body.payload).toBeNull();
    expect(() => commandFrame('s1', 4, 'pass', 'x')).toThrow(ProtocolError);
    expect(() => commandFrame('s1', 5, 'abort', 'x')).toThrow(ProtocolError);
  });
});

describe('frame splitter', () => {
  it('reassembles frames cut at arbitrary byte boundaries', () => {
    const stream = CRASH_LINE + '\n' + RESUMED_LINE + '\n';
    const splitter = new FrameSplitter();
    const out: Frame[] = [];
    for (let i = 0; i < stream.length; i += 7) {
      out.push(...splitter.feed(stream.slice(i, i + 7)));
    }
    expect(out.map((f) => f.kind)).toEqual(['CRASH', 'RESUMED']);
    expect(splitter.pending()).toBe(false);
  });

  it('holds a trailing partial line', () => {
    const splitter = new FrameSplitter();
    expect(splitter.feed(CRASH_LINE.slice(0, 10))).toEqual([]);
    expect(splitter.pending()).toBe(true);
    const frames = splitter.feed(CRASH_LINE.slice(10) + '\n');
    expect(frames.length).toBe(1);
  });

  it('skips blank lines and resyncs after a bad one', () => {
    const bad: [ProtocolError, string][] = [];
    const splitter = new FrameSplitter((err, line) => bad.push([err, line]));
    const frames = splitter.feed(
      '\n' + CRASH_LINE + '\nnot json\n' + RESUMED_LINE + '\n');
    expect(frames.map((f) => f.kind)).toEqual(['CRASH', 'RESUMED']);
    expect(bad.length).toBe(1);
    expect(bad[0]?.[1]).toBe('not json');
  });

  it('throws on a bad line when no handler is given', () => {
    expect(() => new FrameSplitter().feed('junk\n')).toThrow(ProtocolError);
  });
});
