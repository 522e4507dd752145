import * as net from 'node:net';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';

import { afterEach, describe, expect, it } from 'vitest';

import { GatewayClient } from '../src/client.js';
import { startGateway } from '../src/gateway.js';
import type { Gateway } from '../src/gateway.js';
import { commandFrame, encodeFrame } from '../src/protocol.js';
import type { Frame } from '../src/protocol.js';

const PUBLIC_DIR = path.join(
  path.dirname(fileURLToPath(import.meta.url)), '..', 'public');

const CRASH = {
  v: 1, kind: 'CRASH', session: 's1', seq: 1,
  body: {
    program: 'p1', activation: 'a1', exception: 'KeyError', message: 'nope',
    cell: 'c1', path: [], frames: [], variables: {}, traceback: 'tb',
    generation: 0, timestamp: 0,
  },
} as unknown as Frame;

interface FakeBridge {
  address: string;
  received: string[];
  connections: number;
  close(): void;
}

/** Speaks just enough of the bridge's socket side: greet, then collect. */
function fakeBridge(
  greeting: Frame[] = [CRASH], dropFirst = false,
): Promise<FakeBridge> {
  const state: FakeBridge = {
    address: '', received: [], connections: 0, close: () => server.close(),
  };
  const server = net.createServer((sock) => {
    state.connections += 1;
    for (const frame of greeting) sock.write(encodeFrame(frame));
    if (dropFirst && state.connections === 1) {
      sock.end(); // simulate the crashed process going away mid-session
      return;
    }
    let buf = '';
    sock.on('data', (chunk) => {
      buf += chunk.toString('utf-8');
      for (;;) {
        const cut = buf.indexOf('\n');
        if (cut < 0) break;
        state.received.push(buf.slice(0, cut));
        buf = buf.slice(cut + 1);
      }
    });
    sock.on('error', () => {});
  });
  return new Promise((resolve) => {
    server.listen(0, '127.0.0.1', () => {
      const addr = server.address() as net.AddressInfo;
      state.address = `127.0.0.1:${addr.port}`;
      resolve(state);
    });
  });
}

function until<T>(probe: () => T | undefined, ms = 5000): Promise<T> {
  const deadline = Date.now() + ms;
  return new Promise((resolve, reject) => {
    const tick = (): void => {
      const value = probe();
      if (value !== undefined) {
        resolve(value);
      } else if (Date.now() > deadline) {
        reject(new Error('condition never held'));
      } else {
        setTimeout(tick, 20);
      }
    };
    tick();
  });
}

const cleanups: (() => void | Promise<void>)[] = [];
afterEach(async () => {
  while (cleanups.length > 0) await cleanups.pop()?.();
});

async function gatewayFor(bridge: FakeBridge): Promise<Gateway> {
  const gw = await startGateway({ target: bridge.address, root: PUBLIC_DIR });
  cleanups.push(() => gw.close());
  cleanups.push(() => bridge.close());
  return gw;
}

describe('gateway', () => {
  it('relays bridge frames over a streaming response', async () => {
    const bridge = await fakeBridge();
    const gw = await gatewayFor(bridge);

    const frames: Frame[] = [];
    const client = new GatewayClient(`http://127.0.0.1:${gw.port}`, bridge.address);
    cleanups.push(() => client.stop());
    client.start({ onFrame: (f) => frames.push(f) });

    const first = await until(() => frames[0]);
    expect(first.kind).toBe('CRASH');
    expect(first.session).toBe('s1');
  });

  it('delivers validated commands to the bridge socket', async () => {
    const bridge = await fakeBridge();
    const gw = await gatewayFor(bridge);
    const client = new GatewayClient(`http://127.0.0.1:${gw.port}`, bridge.address);

    const cmd = commandFrame('s1', 2, 'action', 'x = 1');
    await client.send(cmd);
    const line = await until(() => bridge.received[0]);
    expect(JSON.parse(line)).toEqual(cmd);
  });

  it('refuses junk and non-command frames before they reach the bridge', async () => {
    const bridge = await fakeBridge();
    const gw = await gatewayFor(bridge);
    const base = `http://127.0.0.1:${gw.port}`;
    const q = `?target=${encodeURIComponent(bridge.address)}`;

    const junk = await fetch(`${base}/send${q}`, { method: 'POST', body: 'not json' });
    expect(junk.status).toBe(400);

    const crash = await fetch(`${base}/send${q}`,
      { method: 'POST', body: encodeFrame(CRASH) });
    expect(crash.status).toBe(400);
    expect(await crash.text()).toContain('only COMMAND');
    expect(bridge.received).toEqual([]);
  });

  it('reports an unreachable bridge instead of hanging', async () => {
    const bridge = await fakeBridge();
    const gw = await gatewayFor(bridge);
    const res = await fetch(
      `http://127.0.0.1:${gw.port}/frames?target=127.0.0.1:1`);
    expect(res.status).toBe(502);
  });

  it('serves the page, tells its default target, hides everything else', async () => {
    const bridge = await fakeBridge();
    const gw = await gatewayFor(bridge);
    const base = `http://127.0.0.1:${gw.port}`;

    const page = await fetch(`${base}/`);
    expect(page.status).toBe(200);
    expect(await page.text()).toContain('insitu console');

    const target = await fetch(`${base}/target`);
    expect(await target.json()).toEqual({ target: bridge.address });

    expect((await fetch(`${base}/../etc/passwd`)).status).toBe(404);
    expect((await fetch(`${base}/missing.js`)).status).toBe(404);
    expect((await fetch(`${base}/index.html.bak`)).status).toBe(404);
  });

  it('reconnects with backoff and sees the replay again', async () => {
    const bridge = await fakeBridge([CRASH], true);
    const gw = await gatewayFor(bridge);

    const frames: Frame[] = [];
    const statuses: string[] = [];
    const client = new GatewayClient(`http://127.0.0.1:${gw.port}`, bridge.address);
    cleanups.push(() => client.stop());
    client.start({
      onFrame: (f) => frames.push(f),
      onStatus: (s) => statuses.push(s),
    });

    // first connection is greeted then dropped; the client must come back
    // on its own and receive the server's replay of the same frame
    await until(() => (frames.length >= 2 ? frames : undefined), 10000);
    expect(bridge.connections).toBeGreaterThanOrEqual(2);
    expect(frames.every((f) => f.kind === 'CRASH')).toBe(true);
    expect(statuses).toContain('reconnecting');
    expect(statuses.lastIndexOf('connected'))
      .toBeGreaterThan(statuses.indexOf('reconnecting'));
  });
});
