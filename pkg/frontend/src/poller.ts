import type { ApiClient } from "./api.js";
import { ChatFeed } from "./chat.js";
import type { ChatRecord } from "./types.js";

export interface PollerCallbacks {
  onRecords?: (fresh: ChatRecord[], all: ChatRecord[]) => void;
  onConnectionChange?: (connected: boolean) => void;
}

/**
 * One poll loop per open session view. A network failure flips the
 * connection flag (the UI shows a retry banner) but keeps the cursor, so the
 * next successful poll resumes without gaps or duplicates.
 */
export class ChatPoller {
  readonly feed = new ChatFeed();
  connected = true;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private api: ApiClient,
    private sessionId: string,
    private callbacks: PollerCallbacks = {},
  ) {}

  async tick(): Promise<ChatRecord[]> {
    try {
      const page = await this.api.getMessages(this.sessionId, this.feed.cursor);
      if (!this.connected) {
        this.connected = true;
        this.callbacks.onConnectionChange?.(true);
      }
      const fresh = this.feed.ingest(page);
      if (fresh.length > 0) {
        this.callbacks.onRecords?.(fresh, this.feed.all());
      }
      return fresh;
    } catch (err) {
      if (this.connected) {
        this.connected = false;
        this.callbacks.onConnectionChange?.(false);
      }
      return [];
    }
  }

  start(intervalMs = 1000): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
