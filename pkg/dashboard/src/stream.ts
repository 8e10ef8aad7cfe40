// WebSocket subscription with automatic reconnect. One socket per open
// assignment view; the reducer deduplicates replayed events after a
// reconnect, so reconnecting is always safe.

import { Envelope } from "./types.js";

export interface StreamHandle {
  close(): void;
}

type WsLike = {
  onopen: ((ev?: any) => void) | null;
  onclose: ((ev?: any) => void) | null;
  onerror: ((ev?: any) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  close(): void;
};

export type WsFactory = (url: string) => WsLike;

export interface StreamCallbacks {
  onEnvelope(envelope: Envelope): void;
  onState?(state: "connecting" | "open" | "closed"): void;
}

export function connectStream(
  url: string,
  callbacks: StreamCallbacks,
  wsFactory: WsFactory = (u) => new WebSocket(u) as unknown as WsLike,
  reconnectDelayMs = 1000
): StreamHandle {
  let closed = false;
  let socket: WsLike | null = null;
  let timer: ReturnType<typeof setTimeout> | null = null;

  function open(): void {
    if (closed) return;
    callbacks.onState?.("connecting");
    socket = wsFactory(url);
    socket.onopen = () => callbacks.onState?.("open");
    socket.onmessage = (event) => {
      let envelope: Envelope;
      try {
        envelope = JSON.parse(event.data);
      } catch {
        return; // not an envelope; ignore
      }
      callbacks.onEnvelope(envelope);
    };
    socket.onerror = () => {
      /* onclose follows */
    };
    socket.onclose = () => {
      callbacks.onState?.("closed");
      if (!closed) timer = setTimeout(open, reconnectDelayMs);
    };
  }

  open();
  return {
    close() {
      closed = true;
      if (timer !== null) clearTimeout(timer);
      socket?.close();
    },
  };
}
