// Page wiring. All state lives in the SessionStore, all markup comes
// from render.ts; this file only moves events in and HTML out. The
// command form is static DOM (never re-rendered) so typing survives
// frame traffic.

import { GatewayClient } from './client.js';
import type { ConnectionState } from './client.js';
import { commandFrame } from './protocol.js';
import type { CommandKind } from './protocol.js';
import { renderConnection, renderSession, renderSessionList } from './render.js';
import { SessionStore } from './session.js';

const store = new SessionStore();
let client: GatewayClient | null = null;
let selected: string | null = null;
let connection: ConnectionState = 'closed';
let connectionDetail = '';

const el = (id: string): HTMLElement => {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node;
};

const sessionsPane = el('sessions');
const sessionPane = el('session');
const connPane = el('connection');
const noticePane = el('notices');
const bridgeInput = el('bridge-input') as HTMLInputElement;
const actionText = el('action-text') as HTMLTextAreaElement;
const surgeryText = el('surgery-text') as HTMLTextAreaElement;

function redraw(): void {
  connPane.innerHTML = renderConnection(connection, connectionDetail);
  const views = store.list();
  if (selected === null && views.length > 0) selected = views[0]?.id ?? null;
  sessionsPane.innerHTML = renderSessionList(views, selected);
  const view = selected === null ? undefined : store.get(selected);
  sessionPane.innerHTML = view === undefined
    ? '<p class="empty">select a session</p>'
    : renderSession(view);
  const usable = view !== undefined && client !== null && store.canSubmit(view.id);
  for (const button of document.querySelectorAll<HTMLButtonElement>('[data-command]')) {
    button.disabled = !usable;
  }
  noticePane.innerHTML = store.notices.length === 0
    ? ''
    : `<p class="notice">${store.notices[store.notices.length - 1] ?? ''}</p>`;
}

function connect(): void {
  client?.stop();
  const target = bridgeInput.value.trim();
  if (target === '') return;
  localStorage.setItem('insitu-bridge', target);
  client = new GatewayClient('', target);
  client.start({
    onFrame: (frame) => {
      store.apply(frame);
      redraw();
    },
    onStatus: (state, detail) => {
      connection = state;
      connectionDetail = detail ?? '';
      redraw();
    },
    onError: (err) => {
      store.notices.push(String(err));
      redraw();
    },
  });
}

async function submit(kind: CommandKind): Promise<void> {
  if (client === null || selected === null || !store.canSubmit(selected)) return;
  const payload = kind === 'action'
    ? actionText.value
    : kind === 'surgery' ? surgeryText.value : null;
  if ((kind === 'action' || kind === 'surgery') && (payload ?? '').trim() === '') {
    store.notices.push(`${kind} needs code in its editor`);
    redraw();
    return;
  }
  const frame = commandFrame(selected, store.nextSeq(selected), kind, payload);
  try {
    await client.send(frame);
    store.sent(frame);
  } catch (err) {
    store.notices.push(String(err));
  }
  redraw();
}

sessionsPane.addEventListener('click', (ev) => {
  const card = (ev.target as HTMLElement).closest('[data-session]');
  if (card !== null) {
    selected = card.getAttribute('data-session');
    redraw();
  }
});

for (const button of document.querySelectorAll<HTMLButtonElement>('[data-command]')) {
  button.addEventListener('click', () => {
    void submit(button.getAttribute('data-command') as CommandKind);
  });
}

el('connect').addEventListener('click', connect);

// single setting: the bridge address; seeded from the gateway's default
const remembered = localStorage.getItem('insitu-bridge');
if (remembered !== null) {
  bridgeInput.value = remembered;
  connect();
} else {
  void fetch('/target')
    .then((res) => res.json())
    .then((data: { target: string }) => {
      bridgeInput.value = data.target;
      connect();
    })
    .catch(() => { /* no default target; the operator types one */ });
}
redraw();
