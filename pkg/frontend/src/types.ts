/** Wire types of the gateway's /v1 surface. */

export interface GuardianRow {
  node: string;
  service: string;
  kind: string;
  status: "alive" | "late" | "dead";
  restarts: number;
  beat_age_s: number;
}

export interface ErrorRecord {
  id: number;
  origin: string;
  source: [string, string];
  severity: "info" | "warning" | "error" | "fatal";
  code: string;
  text: string;
  at: { str: string; tv_sec: number; tv_nsec: number; clock: number };
  acknowledged: boolean;
}

export interface MonkeyRow {
  crate: string;
  mode: "running" | "paused" | "stopped" | "finished";
  pause_reason: string | null;
  entry_index: number;
  scan_index: number;
  repeat_index: number;
  retries_here: number;
  completed_points: number;
  entry_total_points: number;
}

export interface ConsoleSnapshot {
  guardians: GuardianRow[];
  errors: ErrorRecord[];
  monkeys: MonkeyRow[];
  log_tail: string[];
  active_run: string | null;
  taken_at: number;
}

export interface ConsoleEvent {
  event: string;
  at: number;
  [key: string]: unknown;
}

export type CommandBody =
  | { command: "pause" | "resume" | "abort"; crate?: string }
  | { command: "acknowledge_error"; origin: string; id: number }
  | { command: "submit_schedule"; schedule: unknown };

/** Schedule form model validated client-side before submission. */
export interface ScheduleForm {
  entries: ScheduleFormEntry[];
}

export interface ScheduleFormEntry {
  scriptName: string;
  /** parameter name -> default value; the script's schema */
  paramSchema: Record<string, number | string | boolean>;
  params: Record<string, number | string | boolean>;
  repeat: number;
  scan?: { dims: { param: string; values: number[] }[]; order: "snake" | "lexicographic" };
}
