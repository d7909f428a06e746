// HTTP + server-sent-events client for the session service. Uses fetch
// streaming rather than EventSource so the same code runs in the browser
// and in node-based tests.

import type { CommandAck, CommandPayload, StreamMessage } from "./types.js";

export class ServiceClient {
  constructor(readonly baseUrl: string) {}

  async createSession(payload: Record<string, unknown>): Promise<{ session_id: string }> {
    const resp = await fetch(`${this.baseUrl}/api/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!resp.ok) throw new Error(`create session failed: ${resp.status}`);
    return resp.json();
  }

  async getSession(sessionId: string): Promise<Record<string, unknown>> {
    const resp = await fetch(`${this.baseUrl}/api/sessions/${sessionId}`);
    if (!resp.ok) throw new Error(`get session failed: ${resp.status}`);
    return resp.json();
  }

  async submitCommand(sessionId: string, payload: CommandPayload, retries = 2): Promise<CommandAck> {
    // Commands are idempotent per command_id, so a network retry is safe.
    let lastError: unknown = null;
    for (let attempt = 0; attempt <= retries; attempt++) {
      try {
        const resp = await fetch(`${this.baseUrl}/api/sessions/${sessionId}/commands`, {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(payload),
        });
        if (!resp.ok) throw new Error(`command failed: ${resp.status}`);
        return (await resp.json()) as CommandAck;
      } catch (err) {
        lastError = err;
      }
    }
    throw lastError;
  }

  async fetchLog(sessionId: string): Promise<string> {
    const resp = await fetch(`${this.baseUrl}/api/sessions/${sessionId}/log`);
    if (!resp.ok) throw new Error(`log fetch failed: ${resp.status}`);
    return resp.text();
  }

  /** Subscribe to the ordered event stream; resolves when the stream ends. */
  async subscribe(
    sessionId: string,
    onMessage: (msg: StreamMessage) => void,
    signal?: AbortSignal,
  ): Promise<void> {
    const resp = await fetch(`${this.baseUrl}/api/sessions/${sessionId}/events`, { signal });
    if (!resp.ok || resp.body === null) throw new Error(`subscribe failed: ${resp.status}`);
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let idx: number;
      while ((idx = buffer.indexOf("\n\n")) >= 0) {
        const chunk = buffer.slice(0, idx);
        buffer = buffer.slice(idx + 2);
        for (const line of chunk.split("\n")) {
          if (line.startsWith("data: ")) {
            const msg = JSON.parse(line.slice(6)) as StreamMessage;
            onMessage(msg);
            if (msg.type === "status") return;
          }
        }
      }
    }
  }
}
