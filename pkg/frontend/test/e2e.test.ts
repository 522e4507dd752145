// End to end against a real crashed runtime: a Python process holds a
// mid-epoch ValueError open on its bridge socket, the console stack
// (gateway, client, store, renderer) shows the crash, submits the guard
// surgery from the golden file, and watches the run resume and finish.

import { spawn } from 'node:child_process';
import type { ChildProcess } from 'node:child_process';
import * as fs from 'node:fs';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';

import { afterAll, describe, expect, it } from 'vitest';

import { GatewayClient } from '../src/client.js';
import { startGateway } from '../src/gateway.js';
import type { Gateway } from '../src/gateway.js';
import { commandFrame, parseFrame } from '../src/protocol.js';
import type { CommandFrame } from '../src/protocol.js';
import { renderSession } from '../src/render.js';
import { SessionStore } from '../src/session.js';
import type { SessionView } from '../src/session.js';

const HERE = path.dirname(fileURLToPath(import.meta.url));
const RUNTIME = path.join(HERE, '..', 'e2e', 'crashed_runtime.py');
const SURGERY_GOLDEN = path.join(
  HERE, '..', '..', 'docs', 'protocol', 'golden', 'command_surgery.json');

function until<T>(probe: () => T | undefined, ms: number, what: string): Promise<T> {
  const deadline = Date.now() + ms;
  return new Promise((resolve, reject) => {
    const tick = (): void => {
      const value = probe();
      if (value !== undefined) {
        resolve(value);
      } else if (Date.now() > deadline) {
        reject(new Error(`timed out waiting for ${what}`));
      } else {
        setTimeout(tick, 25);
      }
    };
    tick();
  });
}

interface Runtime {
  child: ChildProcess;
  bridge: string;
  stdout: () => string;
  exited: Promise<number | null>;
}

function startRuntime(): Promise<Runtime> {
  const child = spawn('python3', [RUNTIME], {
    stdio: ['ignore', 'pipe', 'pipe'],
  });
  let out = '';
  let err = '';
  child.stdout?.on('data', (chunk) => { out += String(chunk); });
  child.stderr?.on('data', (chunk) => { err += String(chunk); });
  const exited = new Promise<number | null>((resolve) => {
    child.on('exit', (code) => resolve(code));
  });
  return until(() => /^BRIDGE (\S+)$/m.exec(out)?.[1], 20000, 'bridge address')
    .then((bridge) => ({ child, bridge, stdout: () => out, exited }))
    .catch((e) => {
      child.kill();
      throw new Error(`${String(e)}\nstderr so far:\n${err}`);
    });
}

const cleanups: (() => void | Promise<void>)[] = [];
afterAll(async () => {
  while (cleanups.length > 0) await cleanups.pop()?.();
});

describe('console end to end', () => {
  it('renders the crash, submits the golden surgery, displays RESUMED', async () => {
    const runtime = await startRuntime();
    cleanups.push(() => { runtime.child.kill(); });

    const gateway: Gateway = await startGateway({ target: runtime.bridge });
    cleanups.push(() => gateway.close());

    const store = new SessionStore();
    const client = new GatewayClient(
      `http://127.0.0.1:${gateway.port}`, runtime.bridge);
    cleanups.push(() => client.stop());
    client.start({ onFrame: (frame) => store.apply(frame) });

    // crashed session appears and renders with full context
    const view: SessionView = await until(
      () => store.list().find((v) => v.status === 'crashed'),
      15000, 'the CRASH frame');
    const crashed = renderSession(view);
    expect(crashed).toContain('CRASHED');
    expect(crashed).toContain('ValueError');
    expect(crashed).toContain('Only one class present in labels');
    expect(crashed).toContain('rank_score(labels, preds)');
    expect(crashed).toContain('[0, 0, 0, 0]'); // the offending labels preview

    // submit the replacement source from the shared golden file
    const surgeryPayload = (parseFrame(
      fs.readFileSync(SURGERY_GOLDEN, 'utf-8')) as CommandFrame).body.payload;
    expect(surgeryPayload).toBeTruthy();
    expect(store.canSubmit(view.id)).toBe(true);
    const cmd = commandFrame(
      view.id, store.nextSeq(view.id), 'surgery', surgeryPayload);
    await client.send(cmd);
    store.sent(cmd);

    // the run resumes; the console shows it
    await until(
      () => (view.status === 'resumed' ? true : undefined),
      15000, 'the RESUMED frame');
    const resumed = renderSession(view);
    expect(resumed).toContain('RESUMED');
    expect(view.history.some((h) => h.dir === 'received'
      && h.label === 'surgery' && h.ok === true)).toBe(true);

    // and the process itself runs to completion: both epochs scored,
    // the single-class batch skipped by the patched source
    expect(await runtime.exited).toBe(0);
    const done = /^DONE (.+)$/m.exec(runtime.stdout())?.[1]?.split(' ');
    expect(done).toEqual(['0.750', '1.000', '0.750', '1.000']);
  }, 60000);
});
