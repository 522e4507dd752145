// Gateway client. The browser cannot open the bridge's TCP socket, so a
// local gateway relays it over HTTP: GET /frames streams the session's
// newline-delimited frames, POST /send writes one command frame back.
// fetch with a streaming body works in both browsers and node, which
// lets the end-to-end tests drive the exact code the page runs.

import { FrameSplitter, encodeFrame } from './protocol.js';
import type { CommandFrame, Frame } from './protocol.js';

export type ConnectionState = 'connecting' | 'connected' | 'reconnecting' | 'closed';

export interface ClientHandlers {
  onFrame(frame: Frame): void;
  onStatus?(state: ConnectionState, detail?: string): void;
  onError?(err: unknown): void;
}

const BACKOFF_START_MS = 500;
const BACKOFF_CAP_MS = 8000;

export class GatewayClient {
  private controller: AbortController | null = null;
  private stopped = false;

  constructor(
    private readonly base: string,
    private readonly target: string,
  ) {}

  /** Connect and keep reading frames until stop(); reconnects with backoff. */
  start(handlers: ClientHandlers): void {
    this.stopped = false;
    void this.run(handlers);
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
    this.controller = null;
  }

  async send(frame: CommandFrame): Promise<void> {
    const res = await fetch(this.url('/send'), {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: encodeFrame(frame),
    });
    if (!res.ok) {
      throw new Error(`gateway refused command: ${res.status} ${await res.text()}`);
    }
  }

  private url(path: string): string {
    return `${this.base}${path}?target=${encodeURIComponent(this.target)}`;
  }

  private async run(handlers: ClientHandlers): Promise<void> {
    let attempt = 0;
    while (!this.stopped) {
      handlers.onStatus?.(attempt === 0 ? 'connecting' : 'reconnecting',
        attempt === 0 ? undefined : `attempt ${attempt + 1}`);
      try {
        await this.readStream(handlers, () => { attempt = 0; });
      } catch (err) {
        if (!this.stopped) handlers.onError?.(err);
      }
      if (this.stopped) break;
      const delay = Math.min(BACKOFF_START_MS * 2 ** attempt, BACKOFF_CAP_MS);
      attempt += 1;
      handlers.onStatus?.('reconnecting', `retry in ${delay / 1000}s`);
      await sleep(delay);
    }
    handlers.onStatus?.('closed');
  }

  private async readStream(
    handlers: ClientHandlers, onConnected: () => void,
  ): Promise<void> {
    this.controller = new AbortController();
    const res = await fetch(this.url('/frames'), {
      signal: this.controller.signal,
      headers: { accept: 'application/x-ndjson' },
    });
    if (!res.ok || res.body === null) {
      throw new Error(`gateway stream failed: ${res.status}`);
    }
    onConnected();
    handlers.onStatus?.('connected');
    const splitter = new FrameSplitter((err) => handlers.onError?.(err));
    const decoder = new TextDecoder();
    const reader = res.body.getReader();
    try {
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        const frames = splitter.feed(decoder.decode(value, { stream: true }));
        for (const frame of frames) handlers.onFrame(frame);
      }
    } finally {
      reader.releaseLock();
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
