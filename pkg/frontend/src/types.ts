// Wire types mirroring the dbdoctor HTTP/JSON API. The console displays
// exactly what the API sends; nothing is computed client-side.

export interface ChatRecord {
  seq: number;
  speaker: string;
  thought: string | null;
  action: string | null;
  action_input: string | null;
  observation: string | null;
  analysis: string;
}

export interface MessagesPage {
  records: ChatRecord[];
  next_since: number;
}

export interface RootCause {
  cause_id: string;
  evidence: string;
  matched_experience: string;
  solutions: string[];
}

export interface Report {
  alert: AlertInfo;
  causes: RootCause[];
  bullet_summary: string;
  transcript: ChatRecord[];
}

export interface AlertInfo {
  alert_id: string;
  start_time: number;
  end_time: number;
  description: string;
  anomaly_class: string;
}

export interface SessionSummary {
  session_id: string;
  alert: AlertInfo;
  mode: string;
  status: string;
  verdicts: Verdict[];
  report: Report | null;
}

export interface SessionListEntry {
  session_id: string;
  status: string;
  mode: string;
  alert_id: string;
}

export interface Verdict {
  cause_id: string;
  accepted: boolean;
}

export interface ApiError {
  code: string;
  message: string;
}
