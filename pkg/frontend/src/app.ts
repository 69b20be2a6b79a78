// Browser bootstrap: wires the poll loop, feedback form and verdict buttons
// onto index.html. All state shown on screen originates from API payloads.

import { ApiClient, ApiRequestError, feedbackProblem } from "./api.js";
import { ChatPoller } from "./poller.js";
import {
  renderChat,
  renderConnectionBanner,
  renderErrorToast,
  renderReport,
  renderSessionList,
} from "./render.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function startConsole(baseUrl: string): void {
  const api = new ApiClient(baseUrl);
  let poller: ChatPoller | null = null;
  let currentSession: string | null = null;

  const chatBox = el<HTMLDivElement>("chat");
  const bannerBox = el<HTMLDivElement>("banner");
  const reportBox = el<HTMLDivElement>("report");
  const toastBox = el<HTMLDivElement>("toast");

  const toast = (message: string) => {
    toastBox.innerHTML = renderErrorToast(message);
    setTimeout(() => (toastBox.innerHTML = ""), 4000);
  };

  async function refreshSessions(): Promise<void> {
    const { sessions } = await api.listSessions();
    el<HTMLDivElement>("sessions").innerHTML = renderSessionList(sessions);
  }

  async function refreshReport(sessionId: string): Promise<void> {
    const summary = await api.getSession(sessionId);
    if (summary.report) {
      reportBox.innerHTML = renderReport(summary.report, summary.verdicts);
    }
  }

  function openSession(sessionId: string): void {
    currentSession = sessionId;
    poller?.stop();
    poller = new ChatPoller(api, sessionId, {
      onRecords: (_fresh, all) => {
        chatBox.innerHTML = renderChat(all);
        void refreshReport(sessionId);
      },
      onConnectionChange: (connected) => {
        bannerBox.innerHTML = renderConnectionBanner(connected);
      },
    });
    poller.start(1000);
  }

  el<HTMLFormElement>("alert-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const form = event.target as HTMLFormElement;
    const data = new FormData(form);
    const alert = {
      alert_id: String(data.get("alert_id") || "alert-adhoc"),
      start_time: Number(data.get("start_time")),
      end_time: Number(data.get("end_time")),
      description: String(data.get("description") || ""),
      anomaly_class: String(data.get("anomaly_class") || "running_slow"),
    };
    const mode = String(data.get("mode") || "single");
    api
      .startSession(alert, mode)
      .then(({ session_id }) => {
        void refreshSessions();
        openSession(session_id);
      })
      .catch((err) => toast(err.message));
  });

  el<HTMLFormElement>("feedback-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const input = el<HTMLInputElement>("feedback-text");
    const text = input.value;
    const problem = feedbackProblem(text);
    if (problem) {
      toast(problem); // blocked client-side; the API would also reject it
      return;
    }
    if (!currentSession) {
      toast("open a session first");
      return;
    }
    api
      .sendFeedback(currentSession, text)
      .then(() => {
        input.value = "";
      })
      .catch((err) => {
        const detail =
          err instanceof ApiRequestError ? err.message : "feedback failed";
        toast(detail);
      });
  });

  reportBox.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const cause = target.dataset.cause;
    if (!cause || !currentSession) return;
    const accepted = target.classList.contains("verdict-accept");
    const rejected = target.classList.contains("verdict-reject");
    if (!accepted && !rejected) return;
    api
      .recordVerdict(currentSession, cause, accepted)
      .then(() => refreshReport(currentSession as string))
      .catch((err) => toast(err.message));
  });

  el<HTMLDivElement>("sessions").addEventListener("click", (event) => {
    const item = (event.target as HTMLElement).closest<HTMLElement>(".session");
    if (item?.dataset.id) openSession(item.dataset.id);
  });

  void refreshSessions();
}

declare global {
  interface Window {
    startConsole: typeof startConsole;
  }
}

if (typeof window !== "undefined") {
  window.startConsole = startConsole;
}
