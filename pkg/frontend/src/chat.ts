import type { ChatRecord } from "./types.js";

/**
 * Cursor-based record accumulator for one session's live chat.
 *
 * The `since` cursor only advances after records are stored, so a failed or
 * repeated poll can never drop or duplicate entries: anything with a seq at
 * or below the cursor is already present and gets ignored.
 */
export class ChatFeed {
  private records: ChatRecord[] = [];
  private seen = new Set<number>();
  cursor = 0;

  ingest(page: { records: ChatRecord[]; next_since: number }): ChatRecord[] {
    const fresh: ChatRecord[] = [];
    for (const record of page.records) {
      if (this.seen.has(record.seq)) continue;
      this.seen.add(record.seq);
      this.records.push(record);
      fresh.push(record);
    }
    this.records.sort((a, b) => a.seq - b.seq);
    if (this.records.length > 0) {
      this.cursor = this.records[this.records.length - 1].seq;
    }
    return fresh;
  }

  all(): ChatRecord[] {
    return [...this.records];
  }
}
