// Thin fetch wrappers over the session endpoints.

import type { Box, SessionSnapshot } from "./types.js";

export interface SessionOptions {
  sigma?: number;
  eta?: number;
  blank_enabled?: boolean;
  conf_threshold?: number;
  max_len?: number;
}

export type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = fetch,
  ) {}

  async createSession(imageB64: string, options: SessionOptions = {}):
      Promise<{ id: string; status: string }> {
    const res = await this.fetchFn(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image_b64: imageB64, options }),
    });
    if (!res.ok) {
      throw new Error(`create failed: ${res.status} ${await res.text()}`);
    }
    return res.json();
  }

  async submitPrompt(sessionId: string, box: Box): Promise<void> {
    const res = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/prompt`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ box }),
    });
    if (!res.ok) {
      throw new Error(`prompt rejected: ${res.status} ${await res.text()}`);
    }
  }

  async getState(sessionId: string): Promise<SessionSnapshot> {
    const res = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}`);
    if (!res.ok) {
      throw new Error(`state failed: ${res.status}`);
    }
    return res.json();
  }
}
