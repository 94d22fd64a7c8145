/**
 * Single UI state store. Snapshots replace the read model wholesale; events
 * patch it incrementally. Render code never mutates state.
 */

import type { ConsoleEvent, ConsoleSnapshot, ErrorRecord, MonkeyRow } from "./types.js";

export const STALE_AFTER_MS = 3000;

export interface ConsoleState {
  snapshot: ConsoleSnapshot | null;
  /** wall-clock ms when the snapshot or last event landed */
  freshAt: number;
  connected: boolean;
  pendingSchedules: number;
}

export function initialState(): ConsoleState {
  return { snapshot: null, freshAt: 0, connected: false, pendingSchedules: 0 };
}

export type Listener = (state: ConsoleState) => void;

export class ConsoleStore {
  private state: ConsoleState = initialState();
  private listeners = new Set<Listener>();
  private now: () => number;

  constructor(now: () => number = () => Date.now()) {
    this.now = now;
  }

  get current(): ConsoleState {
    return this.state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  }

  private emit(next: ConsoleState): void {
    this.state = next;
    for (const fn of this.listeners) fn(next);
  }

  isStale(): boolean {
    return this.state.freshAt === 0 || this.now() - this.state.freshAt > STALE_AFTER_MS;
  }

  setConnected(connected: boolean): void {
    this.emit({ ...this.state, connected });
  }

  applySnapshot(snapshot: ConsoleSnapshot): void {
    this.emit({
      ...this.state,
      snapshot,
      freshAt: this.now(),
      pendingSchedules: 0,
    });
  }

  markSchedulePending(): void {
    this.emit({ ...this.state, pendingSchedules: this.state.pendingSchedules + 1 });
  }

  /** Incremental event application; unknown events only refresh liveness. */
  applyEvent(event: ConsoleEvent): void {
    const snapshot = this.state.snapshot;
    const next: ConsoleState = { ...this.state, freshAt: this.now(), connected: true };
    if (snapshot === null) {
      this.emit(next);
      return;
    }
    const patched: ConsoleSnapshot = { ...snapshot };
    switch (event.event) {
      case "error": {
        const record = event.record as ErrorRecord;
        const known = patched.errors.some(
          (e) => e.origin === record.origin && e.id === record.id,
        );
        if (!known) patched.errors = [...patched.errors, record];
        break;
      }
      case "error_acknowledged": {
        patched.errors = patched.errors.map((e) =>
          e.origin === event.origin && e.id === event.id
            ? { ...e, acknowledged: true }
            : e,
        );
        break;
      }
      case "running":
      case "paused":
      case "stopped":
      case "finished": {
        patched.monkeys = patched.monkeys.map((m) =>
          m.crate === event.crate
            ? {
                ...m,
                mode: event.event as MonkeyRow["mode"],
                pause_reason: (event.reason as string | null) ?? null,
              }
            : m,
        );
        break;
      }
      case "point": {
        patched.monkeys = patched.monkeys.map((m) =>
          m.crate === event.crate
            ? {
                ...m,
                completed_points: m.completed_points + 1,
                scan_index: Array.isArray(event.position)
                  ? (event.position[1] as number)
                  : m.scan_index,
              }
            : m,
        );
        break;
      }
      case "schedule_submitted": {
        next.pendingSchedules = Math.max(0, this.state.pendingSchedules - 1);
        break;
      }
      default:
        break;
    }
    patched.log_tail = [...patched.log_tail, formatEventLine(event)].slice(-200);
    next.snapshot = patched;
    this.emit(next);
  }
}

export function formatEventLine(event: ConsoleEvent): string {
  const when = new Date(event.at * 1000).toISOString().slice(11, 19);
  const rest = Object.entries(event)
    .filter(([k]) => k !== "event" && k !== "at")
    .map(([k, v]) => `${k}=${JSON.stringify(v)}`)
    .join(" ");
  return `${when} ${event.event}${rest ? " " + rest : ""}`;
}
