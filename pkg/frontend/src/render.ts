/**
 * Pure renderers: identical state in, identical HTML out. Four panes —
 * watchdogs, errors, schedule progress, live log — plus the staleness and
 * connection banners.
 */

import type { ConsoleState } from "./store.js";
import { STALE_AFTER_MS } from "./store.js";
import type { ConsoleSnapshot, ErrorRecord, GuardianRow, MonkeyRow } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const STATUS_CLASS: Record<GuardianRow["status"], string> = {
  alive: "ok",
  late: "warn",
  dead: "bad",
};

const SEVERITY_CLASS: Record<ErrorRecord["severity"], string> = {
  info: "sev-info",
  warning: "sev-warning",
  error: "sev-error",
  fatal: "sev-fatal",
};

export function renderWatchdogPane(guardians: GuardianRow[]): string {
  if (guardians.length === 0) {
    return `<div class="pane" id="watchdogs"><h2>Watchdogs</h2><p class="empty">no services</p></div>`;
  }
  const rows = guardians
    .map(
      (g) =>
        `<tr class="${STATUS_CLASS[g.status]}"><td>${escapeHtml(g.node)}</td>` +
        `<td>${escapeHtml(g.service)}</td><td>${escapeHtml(g.kind)}</td>` +
        `<td>${g.status}</td><td>${g.restarts}</td><td>${g.beat_age_s.toFixed(1)}s</td></tr>`,
    )
    .join("");
  return (
    `<div class="pane" id="watchdogs"><h2>Watchdogs</h2><table>` +
    `<thead><tr><th>node</th><th>service</th><th>kind</th><th>status</th>` +
    `<th>restarts</th><th>beat</th></tr></thead><tbody>${rows}</tbody></table></div>`
  );
}

export function renderErrorPane(errors: ErrorRecord[]): string {
  if (errors.length === 0) {
    return `<div class="pane" id="errors"><h2>Errors</h2><p class="empty">no errors</p></div>`;
  }
  const rows = [...errors]
    .sort((a, b) => b.at.tv_sec - a.at.tv_sec || b.id - a.id)
    .map((e) => {
      const ack = e.acknowledged
        ? `<span class="acked">ack</span>`
        : `<button class="ack" data-origin="${escapeHtml(e.origin)}" data-id="${e.id}">ack</button>`;
      return (
        `<tr class="${SEVERITY_CLASS[e.severity]}"><td>${escapeHtml(e.origin)}/${e.id}</td>` +
        `<td>${e.severity}</td><td>${escapeHtml(e.code)}</td>` +
        `<td>${escapeHtml(e.text)}</td><td>${ack}</td></tr>`
      );
    })
    .join("");
  return (
    `<div class="pane" id="errors"><h2>Errors</h2><table>` +
    `<thead><tr><th>id</th><th>severity</th><th>code</th><th>text</th><th></th></tr></thead>` +
    `<tbody>${rows}</tbody></table></div>`
  );
}

export function renderMonkeyPane(monkeys: MonkeyRow[], pendingSchedules: number): string {
  const pending = pendingSchedules > 0
    ? `<p class="pending">${pendingSchedules} schedule(s) awaiting ack</p>`
    : "";
  if (monkeys.length === 0) {
    return `<div class="pane" id="progress"><h2>Schedule</h2>${pending}<p class="empty">no executors</p></div>`;
  }
  const rows = monkeys
    .map((m) => {
      const total = m.entry_total_points;
      const percent = total > 0 ? Math.floor((100 * m.completed_points) / total) : 0;
      const reason = m.pause_reason ? ` (${escapeHtml(m.pause_reason)})` : "";
      const control = m.mode === "paused"
        ? `<button class="cmd" data-command="resume" data-crate="${escapeHtml(m.crate)}">resume</button>`
        : `<button class="cmd" data-command="pause" data-crate="${escapeHtml(m.crate)}">pause</button>`;
      return (
        `<tr class="mode-${m.mode}"><td>${escapeHtml(m.crate)}</td>` +
        `<td>${m.mode}${reason}</td>` +
        `<td>entry ${m.entry_index} / point ${m.scan_index} / rep ${m.repeat_index}</td>` +
        `<td>retries ${m.retries_here}</td>` +
        `<td><progress max="100" value="${percent}"></progress> ${percent}%</td>` +
        `<td>${control} <button class="cmd" data-command="abort" data-crate="${escapeHtml(m.crate)}">abort</button></td></tr>`
      );
    })
    .join("");
  return (
    `<div class="pane" id="progress"><h2>Schedule</h2>${pending}<table>` +
    `<thead><tr><th>crate</th><th>mode</th><th>position</th><th>retries</th>` +
    `<th>progress</th><th></th></tr></thead><tbody>${rows}</tbody></table></div>`
  );
}

export function renderLogPane(lines: string[]): string {
  const items = lines.slice(-200).map((l) => `<li>${escapeHtml(l)}</li>`).join("");
  return `<div class="pane" id="log"><h2>Live log</h2><ul class="log">${items}</ul></div>`;
}

export function renderBanners(state: ConsoleState, nowMs: number): string {
  const banners: string[] = [];
  if (!state.connected) {
    banners.push(`<div class="banner lost">connection lost - reconnecting</div>`);
  }
  if (state.freshAt === 0 || nowMs - state.freshAt > STALE_AFTER_MS) {
    banners.push(`<div class="banner stale">snapshot stale</div>`);
  }
  return banners.join("");
}

/**
 * The whole dashboard. Deterministic: the same state and clock yield the
 * same markup, so snapshot tests hold byte-for-byte.
 */
export function renderDashboard(state: ConsoleState, nowMs: number): string {
  const snapshot: ConsoleSnapshot | null = state.snapshot;
  if (snapshot === null) {
    return `<main>${renderBanners(state, nowMs)}<p class="empty">waiting for first snapshot</p></main>`;
  }
  const run = snapshot.active_run
    ? `<span class="run">run ${escapeHtml(snapshot.active_run)}</span>`
    : "";
  return (
    `<main>${renderBanners(state, nowMs)}` +
    `<header><h1>circus console</h1>${run}</header>` +
    `<div class="grid">` +
    renderWatchdogPane(snapshot.guardians) +
    renderErrorPane(snapshot.errors) +
    renderMonkeyPane(snapshot.monkeys, state.pendingSchedules) +
    renderLogPane(snapshot.log_tail) +
    `</div></main>`
  );
}
