// Client-side session state, derived purely from frames. Nothing here
// touches program state; the only writes the store records are COMMAND
// frames the user explicitly sent.

import type {
  CommandFrame, CommandKind, CrashBody, Frame, WorkerEntry,
} from './protocol.js';

export type SessionStatus = 'crashed' | 'recovering' | 'resumed' | 'closed';

export interface HistoryEntry {
  seq: number;
  dir: 'sent' | 'received';
  label: string;
  ok?: boolean;
  detail?: string;
}

export class SessionView {
  readonly id: string;
  status: SessionStatus = 'crashed';
  crash: CrashBody | null = null;
  variables: Record<string, string> = {};
  workers: WorkerEntry[] = [];
  history: HistoryEntry[] = [];
  /** Highest seq seen on this session, either direction. */
  lastSeq = 0;
  /** The one command in flight, if any. */
  pending: { seq: number; kind: CommandKind } | null = null;

  constructor(id: string) {
    this.id = id;
  }

  get open(): boolean {
    return this.status === 'crashed' || this.status === 'recovering';
  }
}

export class SessionStore {
  readonly sessions = new Map<string, SessionView>();
  /** Protocol-level oddities worth showing (frames for unknown sessions). */
  readonly notices: string[] = [];

  list(): SessionView[] {
    return [...this.sessions.values()];
  }

  get(id: string): SessionView | undefined {
    return this.sessions.get(id);
  }

  /**
   * Apply one inbound frame. Returns false when the frame was ignored:
   * either a replay (the server resends each session's whole log on
   * reconnect) or a frame for a session this store never saw crash.
   */
  apply(frame: Frame): boolean {
    let view = this.sessions.get(frame.session);
    if (view === undefined) {
      if (frame.kind !== 'CRASH') {
        this.notices.push(
          `${frame.kind} for unknown session ${frame.session}: `
          + noticeText(frame));
        return false;
      }
      view = new SessionView(frame.session);
      this.sessions.set(frame.session, view);
    } else if (frame.seq <= view.lastSeq) {
      return false;
    }
    view.lastSeq = Math.max(view.lastSeq, frame.seq);

    switch (frame.kind) {
      case 'CRASH':
        view.crash = frame.body;
        view.status = 'crashed';
        view.variables = { ...frame.body.variables };
        break;
      case 'STATE':
        if (frame.body.status === 'closed') {
          if (view.status !== 'resumed') view.status = 'closed';
        } else {
          view.status = 'recovering';
        }
        if (frame.body.variables) view.variables = { ...frame.body.variables };
        break;
      case 'RESULT':
        view.history.push({
          seq: frame.seq,
          dir: 'received',
          label: frame.body.command ?? 'protocol',
          ok: frame.body.ok,
          detail: frame.body.detail,
        });
        if (view.pending !== null && frame.seq > view.pending.seq) {
          view.pending = null;
        }
        break;
      case 'RESUMED':
        view.status = 'resumed';
        view.pending = null;
        break;
      case 'WORKERS':
        view.workers = frame.body.workers;
        break;
      case 'COMMAND':
        // the server never sends COMMAND; treat as noise
        this.notices.push(`unexpected COMMAND frame on ${frame.session}`);
        return false;
    }
    return true;
  }

  /** Seq the next outbound command must carry. */
  nextSeq(id: string): number {
    const view = this.sessions.get(id);
    if (view === undefined) throw new Error(`no session ${id}`);
    return view.lastSeq + 1;
  }

  /** One command in flight per session, and only while it is open. */
  canSubmit(id: string): boolean {
    const view = this.sessions.get(id);
    return view !== undefined && view.open && view.pending === null;
  }

  /** Record a command frame that was actually written to the wire. */
  sent(frame: CommandFrame): void {
    const view = this.sessions.get(frame.session);
    if (view === undefined) return;
    view.lastSeq = Math.max(view.lastSeq, frame.seq);
    view.pending = { seq: frame.seq, kind: frame.body.kind };
    view.history.push({
      seq: frame.seq,
      dir: 'sent',
      label: frame.body.kind,
      detail: frame.body.payload === null
        ? undefined
        : summarize(frame.body.payload),
    });
  }
}

function summarize(payload: string): string {
  const flat = payload.replaceAll('\n', ' ').trim();
  return flat.length > 80 ? flat.slice(0, 77) + '...' : flat;
}

function noticeText(frame: Frame): string {
  if (frame.kind === 'RESULT') return frame.body.detail;
  return `seq ${frame.seq}`;
}
