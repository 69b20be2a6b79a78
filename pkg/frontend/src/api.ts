import type {
  AlertInfo,
  MessagesPage,
  SessionListEntry,
  SessionSummary,
} from "./types.js";

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

/** Client-side feedback validation; the form blocks before any request. */
export function feedbackProblem(text: string): string | null {
  return text.trim().length === 0 ? "feedback text must be non-empty" : null;
}

/** Thin typed client over the dbdoctor HTTP/JSON API. Configuration is the
 * base URL, nothing else. */
export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
      headers: { "content-type": "application/json" },
      ...init,
    });
    const body = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const code = typeof body.code === "string" ? body.code : "http_error";
      const message =
        typeof body.message === "string" ? body.message : `HTTP ${resp.status}`;
      throw new ApiRequestError(resp.status, code, message);
    }
    return body as T;
  }

  startSession(alert: AlertInfo, mode: string): Promise<{ session_id: string }> {
    return this.request("/api/sessions", {
      method: "POST",
      body: JSON.stringify({ alert, mode }),
    });
  }

  listSessions(): Promise<{ sessions: SessionListEntry[] }> {
    return this.request("/api/sessions");
  }

  getSession(sessionId: string): Promise<SessionSummary> {
    return this.request(`/api/sessions/${sessionId}`);
  }

  getMessages(sessionId: string, since: number): Promise<MessagesPage> {
    return this.request(`/api/sessions/${sessionId}/messages?since=${since}`);
  }

  sendFeedback(sessionId: string, text: string): Promise<{ ok: boolean }> {
    return this.request(`/api/sessions/${sessionId}/feedback`, {
      method: "POST",
      body: JSON.stringify({ text }),
    });
  }

  recordVerdict(
    sessionId: string,
    causeId: string,
    accepted: boolean,
  ): Promise<{ ok: boolean }> {
    return this.request(`/api/sessions/${sessionId}/verdict`, {
      method: "POST",
      body: JSON.stringify({ cause_id: causeId, accepted }),
    });
  }
}
