// Frame layer of the session bridge wire protocol: one JSON object per
// line, schema documented field-by-field in docs/protocol.md. This module
// validates both directions; the body object is kept as parsed so a
// serialize/parse round trip is the identity.

export const PROTOCOL_VERSION = 1;

export const FRAME_KINDS = [
  'CRASH', 'STATE', 'COMMAND', 'RESULT', 'RESUMED', 'WORKERS',
] as const;
export type FrameKind = (typeof FRAME_KINDS)[number];

export const COMMAND_KINDS = ['pass', 'action', 'surgery', 'abort'] as const;
export type CommandKind = (typeof COMMAND_KINDS)[number];

export interface StackEntry {
  cell: string;
  line: number;
  unit: string;
  statement: string;
}

export interface CrashBody {
  program: string;
  activation: string;
  exception: string;
  message: string;
  cell: string;
  path: [string, number][];
  frames: StackEntry[];
  variables: Record<string, string>;
  traceback: string;
  generation: number;
  timestamp: number;
}

export interface StateBody {
  status: 'recovering' | 'closed';
  variables?: Record<string, string>;
}

export interface CommandBody {
  kind: CommandKind;
  payload: string | null;
}

export interface ResultBody {
  ok: boolean;
  command?: string;
  detail: string;
}

export interface ResumedBody {
  status: 'resumed';
}

export interface WorkerEntry {
  id: string;
  status: string;
  fix_host: boolean;
}

export interface WorkersBody {
  workers: WorkerEntry[];
}

interface Envelope<K extends FrameKind, B> {
  v: typeof PROTOCOL_VERSION;
  kind: K;
  session: string;
  seq: number;
  body: B;
}

export type CrashFrame = Envelope<'CRASH', CrashBody>;
export type StateFrame = Envelope<'STATE', StateBody>;
export type CommandFrame = Envelope<'COMMAND', CommandBody>;
export type ResultFrame = Envelope<'RESULT', ResultBody>;
export type ResumedFrame = Envelope<'RESUMED', ResumedBody>;
export type WorkersFrame = Envelope<'WORKERS', WorkersBody>;

export type Frame =
  | CrashFrame
  | StateFrame
  | CommandFrame
  | ResultFrame
  | ResumedFrame
  | WorkersFrame;

export class ProtocolError extends Error {}

function fail(detail: string): never {
  throw new ProtocolError(detail);
}

function isRecord(v: unknown): v is Record<string, unknown> {
  return typeof v === 'object' && v !== null && !Array.isArray(v);
}

function wantString(body: Record<string, unknown>, field: string): string {
  const v = body[field];
  if (typeof v !== 'string') fail(`body.${field} must be a string`);
  return v;
}

function wantStringMap(v: unknown, where: string): void {
  if (!isRecord(v)) fail(`${where} must be an object`);
  for (const [name, value] of Object.entries(v)) {
    if (typeof value !== 'string') fail(`${where}.${name} must be a string`);
  }
}

function checkCrash(body: Record<string, unknown>): void {
  for (const f of ['program', 'activation', 'exception', 'message', 'cell',
                   'traceback']) {
    wantString(body, f);
  }
  if (!Number.isInteger(body.generation)) fail('body.generation must be an integer');
  if (typeof body.timestamp !== 'number') fail('body.timestamp must be a number');
  if (!Array.isArray(body.path)) fail('body.path must be an array');
  for (const step of body.path) {
    if (!Array.isArray(step) || step.length !== 2
        || typeof step[0] !== 'string' || !Number.isInteger(step[1])) {
      fail('body.path entries must be [kind, index] pairs');
    }
  }
  if (!Array.isArray(body.frames)) fail('body.frames must be an array');
  for (const fr of body.frames) {
    if (!isRecord(fr) || typeof fr.cell !== 'string'
        || !Number.isInteger(fr.line) || typeof fr.unit !== 'string'
        || typeof fr.statement !== 'string') {
      fail('body.frames entries must be {cell, line, unit, statement}');
    }
  }
  wantStringMap(body.variables, 'body.variables');
}

function checkState(body: Record<string, unknown>): void {
  if (body.status !== 'recovering' && body.status !== 'closed') {
    fail(`state status must be recovering or closed, got ${JSON.stringify(body.status)}`);
  }
  if (body.variables !== undefined) wantStringMap(body.variables, 'body.variables');
}

function checkCommand(body: Record<string, unknown>): void {
  if (!COMMAND_KINDS.includes(body.kind as CommandKind)) {
    fail(`unknown command kind ${JSON.stringify(body.kind)}`);
  }
  if (body.payload !== null && body.payload !== undefined
      && typeof body.payload !== 'string') {
    fail('command payload must be text');
  }
}

function checkResult(body: Record<string, unknown>): void {
  if (typeof body.ok !== 'boolean') fail('result ok must be a boolean');
  wantString(body, 'detail');
  if (body.command !== undefined && typeof body.command !== 'string') {
    fail('result command must be a string when present');
  }
}

function checkResumed(body: Record<string, unknown>): void {
  if (body.status !== 'resumed') fail('resumed status must be "resumed"');
}

function checkWorkers(body: Record<string, unknown>): void {
  if (!Array.isArray(body.workers)) fail('body.workers must be an array');
  for (const w of body.workers) {
    if (!isRecord(w) || typeof w.id !== 'string' || typeof w.status !== 'string'
        || typeof w.fix_host !== 'boolean') {
      fail('worker entries must be {id, status, fix_host}');
    }
  }
}

const BODY_CHECKS: Record<FrameKind, (body: Record<string, unknown>) => void> = {
  CRASH: checkCrash,
  STATE: checkState,
  COMMAND: checkCommand,
  RESULT: checkResult,
  RESUMED: checkResumed,
  WORKERS: checkWorkers,
};

/** Validate one parsed JSON value as a frame. The body is not copied. */
export function frameFromJson(data: unknown): Frame {
  if (!isRecord(data)) fail('frame must be a JSON object');
  if (data.v !== PROTOCOL_VERSION) {
    fail(`unsupported protocol version ${JSON.stringify(data.v)}`);
  }
  const kind = data.kind;
  if (!FRAME_KINDS.includes(kind as FrameKind)) {
    fail(`unknown frame kind ${JSON.stringify(kind)}`);
  }
  const session = data.session;
  if (typeof session !== 'string' || session === '') fail('frame missing session id');
  const seq = data.seq;
  if (!Number.isInteger(seq) || (seq as number) < 1) {
    fail(`bad seq ${JSON.stringify(seq)}`);
  }
  const body = data.body ?? {};
  if (!isRecord(body)) fail('frame body must be an object');
  BODY_CHECKS[kind as FrameKind](body);
  return {
    v: PROTOCOL_VERSION, kind: kind as FrameKind, session,
    seq: seq as number, body,
  } as unknown as Frame;
}

export function parseFrame(line: string): Frame {
  let data: unknown;
  try {
    data = JSON.parse(line);
  } catch (err) {
    fail(`frame is not valid JSON: ${String(err)}`);
  }
  return frameFromJson(data);
}

/** Wire form: compact JSON plus the terminating newline. */
export function encodeFrame(frame: Frame): string {
  return JSON.stringify(frame) + '\n';
}

export function commandFrame(
  session: string, seq: number, kind: CommandKind, payload: string | null = null,
): CommandFrame {
  if (payload !== null && (kind === 'pass' || kind === 'abort')) {
    fail(`${kind} takes no payload`);
  }
  return { v: PROTOCOL_VERSION, kind: 'COMMAND', session, seq, body: { kind, payload } };
}

/**
 * Reassembles frames from a byte stream cut at arbitrary boundaries.
 * Feed chunks as they arrive; complete lines come back as frames, a
 * trailing partial line is buffered for the next chunk. A line that
 * fails to parse goes to onBad (or is thrown without one) and reading
 * resynchronizes at the next newline, so one bad line never costs the
 * frames around it.
 */
export class FrameSplitter {
  private buffer = '';

  constructor(private readonly onBad?: (err: ProtocolError, line: string) => void) {}

  feed(chunk: string): Frame[] {
    this.buffer += chunk;
    const frames: Frame[] = [];
    for (;;) {
      const cut = this.buffer.indexOf('\n');
      if (cut < 0) break;
      const line = this.buffer.slice(0, cut);
      this.buffer = this.buffer.slice(cut + 1);
      if (line.trim() === '') continue;
      try {
        frames.push(parseFrame(line));
      } catch (err) {
        if (!(err instanceof ProtocolError) || this.onBad === undefined) throw err;
        this.onBad(err, line);
      }
    }
    return frames;
  }

  /** True when a partial line is still waiting for its newline. */
  pending(): boolean {
    return this.buffer.trim() !== '';
  }
}
