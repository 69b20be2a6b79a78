import type { ChatRecord, Report, SessionListEntry, Verdict } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** One chat entry. Human records get their own styling class. */
export function renderRecord(record: ChatRecord): string {
  const klass = record.speaker === "human" ? "record human" : "record agent";
  const parts: string[] = [
    `<div class="${klass}" data-seq="${record.seq}">`,
    `<span class="speaker">${escapeHtml(record.speaker)}</span>`,
  ];
  if (record.thought) {
    parts.push(`<div class="thought">Thought: ${escapeHtml(record.thought)}</div>`);
  }
  if (record.action) {
    parts.push(`<div class="action">Action: ${escapeHtml(record.action)}</div>`);
  }
  if (record.action_input) {
    parts.push(
      `<div class="action-input">Action Input: ${escapeHtml(record.action_input)}</div>`,
    );
  }
  if (record.observation) {
    parts.push(
      `<div class="observation">Observation: ${escapeHtml(record.observation)}</div>`,
    );
  }
  if (record.analysis) {
    parts.push(`<div class="analysis">${escapeHtml(record.analysis)}</div>`);
  }
  parts.push("</div>");
  return parts.join("");
}

export function renderChat(records: ChatRecord[]): string {
  return records.map(renderRecord).join("\n");
}

export function renderConnectionBanner(connected: boolean): string {
  return connected
    ? ""
    : `<div class="banner retry">connection lost — retrying, stream resumes where it left off</div>`;
}

export function renderVerdictBadge(verdict: Verdict): string {
  const label = verdict.accepted ? "accepted" : "rejected";
  return `<span class="badge verdict-${label}" data-cause="${escapeHtml(
    verdict.cause_id,
  )}">${escapeHtml(verdict.cause_id)}: ${label}</span>`;
}

/** Report view: one block per cause with its solutions and verdict controls. */
export function renderReport(report: Report, verdicts: Verdict[] = []): string {
  const byCause = new Map(verdicts.map((v) => [v.cause_id, v]));
  const blocks: string[] = [
    `<div class="report">`,
    `<h2>Report for ${escapeHtml(report.alert.alert_id)}</h2>`,
  ];
  if (report.causes.length === 0) {
    blocks.push(`<p class="no-cause">no root cause identified</p>`);
  }
  for (const cause of report.causes) {
    blocks.push(`<div class="cause" data-cause="${escapeHtml(cause.cause_id)}">`);
    blocks.push(`<h3>${escapeHtml(cause.cause_id)}</h3>`);
    blocks.push(`<p class="evidence">${escapeHtml(cause.evidence)}</p>`);
    for (const solution of cause.solutions) {
      blocks.push(`<li class="solution">${escapeHtml(solution)}</li>`);
    }
    const verdict = byCause.get(cause.cause_id);
    if (verdict) {
      blocks.push(renderVerdictBadge(verdict));
    } else {
      blocks.push(
        `<button class="verdict-accept" data-cause="${escapeHtml(cause.cause_id)}">effective</button>`,
        `<button class="verdict-reject" data-cause="${escapeHtml(cause.cause_id)}">not effective</button>`,
      );
    }
    blocks.push(`</div>`);
  }
  blocks.push(`</div>`);
  return blocks.join("\n");
}

export function renderSessionList(sessions: SessionListEntry[]): string {
  const rows = sessions
    .map(
      (s) =>
        `<li class="session" data-id="${escapeHtml(s.session_id)}">` +
        `${escapeHtml(s.session_id)} — ${escapeHtml(s.alert_id)} ` +
        `[${escapeHtml(s.mode)}] <em>${escapeHtml(s.status)}</em></li>`,
    )
    .join("\n");
  return `<ul class="sessions">${rows}</ul>`;
}

export function renderErrorToast(message: string): string {
  return `<div class="toast error">${escapeHtml(message)}</div>`;
}
