/**
 * Gateway client: snapshot fetch, command posting with an in-flight dedup
 * guard, and the ndjson event stream with automatic reconnect.
 */

import type { CommandBody, ConsoleEvent, ConsoleSnapshot } from "./types.js";

export interface GatewayClientOptions {
  baseUrl: string;
  token?: string;
  /** reconnect backoff schedule in ms; last value repeats */
  backoffMs?: number[];
  fetchImpl?: typeof fetch;
}

export class GatewayError extends Error {
  constructor(message: string, readonly status: number, readonly field?: string) {
    super(message);
  }
}

export class GatewayClient {
  private baseUrl: string;
  private token?: string;
  private backoff: number[];
  private fetchImpl: typeof fetch;
  private inFlight = new Set<string>();
  private stopped = false;

  constructor(options: GatewayClientOptions) {
    this.baseUrl = options.baseUrl.replace(/\/$/, "");
    this.token = options.token;
    this.backoff = options.backoffMs ?? [250, 500, 1000, 2000, 5000];
    this.fetchImpl = options.fetchImpl ?? fetch.bind(globalThis);
  }

  private headers(json = false): Record<string, string> {
    const headers: Record<string, string> = {};
    if (json) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  async fetchSnapshot(): Promise<ConsoleSnapshot> {
    const resp = await this.fetchImpl(`${this.baseUrl}/v1/snapshot`, {
      headers: this.headers(),
    });
    if (!resp.ok) throw new GatewayError(`snapshot failed`, resp.status);
    return (await resp.json()) as ConsoleSnapshot;
  }

  /**
   * POST a command. Identical commands are deduplicated while one is still
   * in flight, so a double-clicked Pause sends exactly one request.
   */
  async sendCommand(body: CommandBody): Promise<Record<string, unknown> | null> {
    const key = JSON.stringify(body);
    if (this.inFlight.has(key)) return null;
    this.inFlight.add(key);
    try {
      const resp = await this.fetchImpl(`${this.baseUrl}/v1/command`, {
        method: "POST",
        headers: this.headers(true),
        body: key,
      });
      const payload = (await resp.json()) as Record<string, unknown>;
      if (!resp.ok) {
        throw new GatewayError(
          String(payload.error ?? resp.status),
          resp.status,
          (payload.field as string) ?? undefined,
        );
      }
      return payload;
    } finally {
      this.inFlight.delete(key);
    }
  }

  stop(): void {
    this.stopped = true;
  }

  /**
   * Consume /v1/events forever, invoking the callbacks; reconnects with
   * backoff and resets the backoff after a healthy connection.
   */
  async streamEvents(
    onEvent: (event: ConsoleEvent) => void,
    onStatus?: (connected: boolean) => void,
  ): Promise<void> {
    let attempt = 0;
    while (!this.stopped) {
      try {
        const resp = await this.fetchImpl(`${this.baseUrl}/v1/events`, {
          headers: this.headers(),
        });
        if (!resp.ok || resp.body === null) {
          throw new GatewayError("event stream refused", resp.status);
        }
        onStatus?.(true);
        attempt = 0;
        await this.consume(resp.body, onEvent);
      } catch {
        // fall through to reconnect
      }
      onStatus?.(false);
      if (this.stopped) return;
      const wait = this.backoff[Math.min(attempt, this.backoff.length - 1)];
      attempt += 1;
      await new Promise((resolve) => setTimeout(resolve, wait));
    }
  }

  private async consume(
    body: ReadableStream<Uint8Array>,
    onEvent: (event: ConsoleEvent) => void,
  ): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      buffer += decoder.decode(value, { stream: true });
      let newline = buffer.indexOf("\n");
      while (newline >= 0) {
        const line = buffer.slice(0, newline).trim();
        buffer = buffer.slice(newline + 1);
        if (line) {
          try {
            onEvent(JSON.parse(line) as ConsoleEvent);
          } catch {
            // skip malformed lines, keep the stream alive
          }
        }
        newline = buffer.indexOf("\n");
      }
    }
  }
}
