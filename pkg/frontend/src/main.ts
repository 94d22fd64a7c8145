/** Browser entry: wire the store, the gateway client and the renderers. */

import { GatewayClient } from "./api.js";
import { renderDashboard } from "./render.js";
import { ConsoleStore } from "./store.js";

export function mount(root: HTMLElement, baseUrl: string, token?: string): () => void {
  const store = new ConsoleStore();
  const client = new GatewayClient({ baseUrl, token });

  const redraw = () => {
    root.innerHTML = renderDashboard(store.current, Date.now());
  };
  const unsubscribe = store.subscribe(redraw);

  root.addEventListener("click", (raw) => {
    const target = raw.target as HTMLElement;
    if (target.matches("button.cmd")) {
      const command = target.dataset.command as "pause" | "resume" | "abort";
      void client.sendCommand({ command, crate: target.dataset.crate });
    } else if (target.matches("button.ack")) {
      void client.sendCommand({
        command: "acknowledge_error",
        origin: target.dataset.origin ?? "",
        id: Number(target.dataset.id),
      });
    }
  });

  void client.fetchSnapshot().then((snapshot) => store.applySnapshot(snapshot));
  void client.streamEvents(
    (event) => store.applyEvent(event),
    (connected) => {
      store.setConnected(connected);
      if (connected) {
        // full refetch after every reconnect: events may have been missed
        void client.fetchSnapshot().then((snapshot) => store.applySnapshot(snapshot));
      }
    },
  );
  const staleTimer = setInterval(redraw, 1000);
  redraw();
  return () => {
    clearInterval(staleTimer);
    unsubscribe();
    client.stop();
  };
}

declare global {
  interface Window {
    circusConsoleMount: typeof mount;
  }
}

if (typeof window !== "undefined") {
  window.circusConsoleMount = mount;
}
