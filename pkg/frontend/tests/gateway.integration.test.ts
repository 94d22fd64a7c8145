/**
 * End-to-end against the real gateway: spawns the Python demo process and
 * drives /v1/snapshot, /v1/command and /v1/events through the client, the
 * store and the renderers, exactly as the browser build does.
 */

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { GatewayClient } from "../src/api.js";
import { renderDashboard } from "../src/render.js";
import { ConsoleStore } from "../src/store.js";
import type { ConsoleEvent } from "../src/types.js";

const PORT = 18755;
const BASE = `http://127.0.0.1:${PORT}`;

let demo: ChildProcess;

async function waitForGateway(timeoutMs = 15000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const resp = await fetch(`${BASE}/v1/snapshot`);
      if (resp.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error("gateway demo never came up");
    await new Promise((r) => setTimeout(r, 100));
  }
}

async function until(check: () => boolean, timeoutMs: number): Promise<number> {
  const started = Date.now();
  while (!check()) {
    if (Date.now() - started > timeoutMs) {
      throw new Error(`condition not met within ${timeoutMs} ms`);
    }
    await new Promise((r) => setTimeout(r, 10));
  }
  return Date.now() - started;
}

beforeAll(async () => {
  demo = spawn(
    "python3",
    ["-m", "circus.orchestration.demo", "--port", String(PORT),
     "--error-every", "0.5", "--point-delay", "0.05",
     "--state-dir", mkdtempSync(join(tmpdir(), "console-it-"))],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  await waitForGateway();
}, 20000);

afterAll(() => {
  demo?.kill("SIGTERM");
});

describe("operator console against the live gateway", () => {
  it("reflects pause commands and incoming errors within one second", async () => {
    const store = new ConsoleStore();
    const client = new GatewayClient({ baseUrl: BASE, backoffMs: [100] });
    const events: ConsoleEvent[] = [];
    const streaming = client.streamEvents(
      (event) => {
        events.push(event);
        store.applyEvent(event);
      },
      (up) => store.setConnected(up),
    );
    store.applySnapshot(await client.fetchSnapshot());
    expect(store.current.snapshot?.monkeys[0].crate).toBe("crate0");

    // pause: the console read model must flip within 1 s of the command
    await client.sendCommand({ command: "pause", crate: "crate0" });
    const pauseLatency = await until(
      () => store.current.snapshot?.monkeys[0].mode === "paused", 1000);
    expect(pauseLatency).toBeLessThanOrEqual(1000);

    // a newly reported error reaches the error pane within 1 s of its event
    const errorsBefore = store.current.snapshot?.errors.length ?? 0;
    await until(
      () => (store.current.snapshot?.errors.length ?? 0) > errorsBefore, 2000);
    const lastEvent = events.filter((e) => e.event === "error").at(-1);
    expect(lastEvent).toBeDefined();
    const skewMs = Date.now() - (lastEvent!.at as number) * 1000;
    expect(skewMs).toBeLessThanOrEqual(1000);
    const html = renderDashboard(store.current, Date.now());
    expect(html).toContain("demo_error");
    expect(html).toContain("paused (operator)");

    // resume so the demo keeps scanning for other consumers
    await client.sendCommand({ command: "resume", crate: "crate0" });
    await until(() => store.current.snapshot?.monkeys[0].mode === "running", 1000);

    client.stop();
    await fetch(`${BASE}/v1/snapshot`); // nudge so the stream loop can exit
    await Promise.race([streaming, new Promise((r) => setTimeout(r, 500))]);
  }, 20000);

  it("acknowledges an error end to end", async () => {
    const client = new GatewayClient({ baseUrl: BASE });
    const snap = await client.fetchSnapshot();
    const unacked = snap.errors.find((e) => !e.acknowledged);
    expect(unacked).toBeDefined();
    await client.sendCommand({
      command: "acknowledge_error",
      origin: unacked!.origin,
      id: unacked!.id,
    });
    const after = await client.fetchSnapshot();
    const same = after.errors.find(
      (e) => e.origin === unacked!.origin && e.id === unacked!.id);
    expect(same?.acknowledged).toBe(true);
  }, 10000);

  it("rejects malformed schedule submissions with the field path", async () => {
    const client = new GatewayClient({ baseUrl: BASE });
    try {
      await client.sendCommand({ command: "submit_schedule", schedule: { bogus: 1 } });
      expect.unreachable();
    } catch (e) {
      expect((e as { field?: string }).field).toBe("schedule");
    }
  }, 10000);

  it("keeps the snapshot render deterministic on live data", async () => {
    const client = new GatewayClient({ baseUrl: BASE });
    const store = new ConsoleStore(() => 123456);
    store.applySnapshot(await client.fetchSnapshot());
    const once = renderDashboard(store.current, 123999);
    const twice = renderDashboard(store.current, 123999);
    expect(once).toBe(twice);
  }, 10000);
});
