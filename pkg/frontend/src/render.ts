// HTML fragments for every piece of a session. Pure functions of the
// store state so they can be asserted on directly; the app assigns them
// to innerHTML and wires events by delegation.

import type { CrashBody, WorkerEntry } from './protocol.js';
import type { HistoryEntry, SessionView } from './session.js';

export function escapeHtml(text: string): string {
  return text
    .replaceAll('&', '&amp;')
    .replaceAll('<', '&lt;')
    .replaceAll('>', '&gt;')
    .replaceAll('"', '&quot;');
}

const esc = escapeHtml;

export function renderStatus(view: SessionView): string {
  if (view.status === 'resumed') {
    return '<div class="banner banner-resumed">RESUMED</div>';
  }
  if (view.status === 'closed') {
    return '<div class="banner banner-closed">session closed without resuming</div>';
  }
  const note = view.pending === null
    ? 'run held open, waiting for a command'
    : `${view.pending.kind} in flight (seq ${view.pending.seq})`;
  return `<div class="banner banner-${view.status}">`
    + `${view.status.toUpperCase()}<span class="note">${esc(note)}</span></div>`;
}

export function renderCrash(crash: CrashBody): string {
  const where = crash.path.map(([kind, idx]) => `${kind}[${idx}]`).join(' / ');
  const rows = crash.frames.map((fr, i) => {
    const marker = i === 0 ? '<td class="marker">&lt;- crash</td>' : '<td></td>';
    return `<tr class="${i === 0 ? 'crash-site' : ''}">`
      + `<td class="cell">${esc(fr.cell)}</td>`
      + `<td class="unit">${esc(fr.unit)}:${fr.line}</td>`
      + `<td class="stmt"><code>${esc(fr.statement)}</code></td>${marker}</tr>`;
  }).join('');
  return `
<section class="crash">
  <h2><span class="exc">${esc(crash.exception)}</span>: ${esc(crash.message)}</h2>
  <p class="meta">program ${esc(crash.program)} / activation ${esc(crash.activation)}
    / generation ${crash.generation} / cell ${esc(crash.cell)} at ${esc(where)}</p>
  <h3>stack (innermost first)</h3>
  <table class="stack">${rows || '<tr><td>(no frames mapped)</td></tr>'}</table>
  <details class="traceback"><summary>full traceback</summary>
    <pre>${esc(crash.traceback)}</pre></details>
</section>`;
}

export function renderVariables(variables: Record<string, string>): string {
  const names = Object.keys(variables).sort();
  if (names.length === 0) {
    return '<section class="vars"><h3>variables</h3><p>(none bound yet)</p></section>';
  }
  const rows = names.map((name) =>
    `<tr><td class="name">${esc(name)}</td>`
    + `<td class="value"><code>${esc(variables[name] ?? '')}</code></td></tr>`).join('');
  return `<section class="vars"><h3>variables</h3><table>${rows}</table></section>`;
}

export function renderWorkers(workers: WorkerEntry[]): string {
  if (workers.length === 0) return '';
  const rows = workers.map((w) => {
    const badge = w.fix_host ? ' <span class="badge">fix host</span>' : '';
    return `<tr><td>${esc(w.id)}</td>`
      + `<td class="status-${esc(w.status)}">${esc(w.status)}${badge}</td></tr>`;
  }).join('');
  return `<section class="workers"><h3>workers</h3><table>${rows}</table></section>`;
}

export function renderHistory(history: HistoryEntry[]): string {
  if (history.length === 0) return '';
  const rows = history.map((h) => {
    const outcome = h.ok === undefined ? '' : (h.ok ? ' ok' : ' failed');
    const detail = h.detail === undefined ? '' : `: ${esc(h.detail)}`;
    return `<li class="${h.dir}${h.ok === false ? ' failed' : ''}">`
      + `<span class="seq">#${h.seq}</span> ${h.dir} ${esc(h.label)}${outcome}${detail}</li>`;
  }).join('');
  return `<section class="history"><h3>commands</h3><ol>${rows}</ol></section>`;
}

export function renderSession(view: SessionView): string {
  const parts = [
    `<h1 class="session-id">${esc(view.id)}</h1>`,
    renderStatus(view),
    view.crash === null ? '' : renderCrash(view.crash),
    renderVariables(view.variables),
    renderWorkers(view.workers),
    renderHistory(view.history),
  ];
  return parts.filter((p) => p !== '').join('\n');
}

export function renderSessionList(views: SessionView[], selected: string | null): string {
  if (views.length === 0) {
    return '<p class="empty">no crashed sessions; the bridge is quiet</p>';
  }
  return views.map((v) => {
    const summary = v.crash === null
      ? '(no crash details)'
      : `${v.crash.exception}: ${v.crash.message}`;
    const cls = v.id === selected ? 'card selected' : 'card';
    return `<div class="${cls} status-${v.status}" data-session="${esc(v.id)}">`
      + `<div class="card-id">${esc(v.id)}</div>`
      + `<div class="card-status">${v.status}</div>`
      + `<div class="card-summary">${esc(summary)}</div></div>`;
  }).join('\n');
}

export function renderConnection(state: string, detail = ''): string {
  const note = detail === '' ? '' : ` <span class="note">${esc(detail)}</span>`;
  const stale = state === 'connected'
    ? ''
    : '<div class="banner banner-stale">link down, showing last known state</div>';
  return `<span class="conn conn-${esc(state)}">${esc(state)}</span>${note}${stale}`;
}
