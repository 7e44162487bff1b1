import { ApiError, QaClient } from "./api.js";
import { renderMetricsChart, renderTimesChart } from "./charts.js";
import { renderHighlight } from "./highlight.js";
import { defaultState, loadState, saveState, type UiState } from "./store.js";
import type { Answer } from "./types.js";

/**
 * Single-page client of the QA service.
 *
 * The app owns one committed UiState (persisted across reloads) plus two
 * in-flight flags. At most one /ask and one /feedback request run at a
 * time; the submit buttons are disabled synchronously before the fetch so
 * a double-click cannot produce a second record. Nothing numeric shown on
 * screen is computed here: answer spans, scores, and dashboard series all
 * come verbatim from service responses.
 */

// opaque local identifier for a pasted context; sent instead of the text
function contextId(context: string): string {
  const bytes = new TextEncoder().encode(context);
  let hash = 0x811c9dc5;
  for (const b of bytes) {
    hash ^= b;
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return "ctx-" + hash.toString(16).padStart(8, "0");
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) {
    node.setAttribute(k, v);
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    return err.message;
  }
  if (err instanceof Error) {
    return `cannot reach service: ${err.message}`;
  }
  return "cannot reach service";
}

export class App {
  private readonly root: HTMLElement;
  private readonly client: QaClient;
  private readonly storage: Storage;
  private state: UiState;

  private askInFlight = false;
  private feedbackInFlight = false;

  // ask view
  private contextInput!: HTMLTextAreaElement;
  private questionInput!: HTMLInputElement;
  private askButton!: HTMLButtonElement;
  private askError!: HTMLElement;
  private answerPanel!: HTMLElement;
  private answerText!: HTMLElement;
  private answerScore!: HTMLElement;
  private highlightBox!: HTMLElement;

  // feedback block
  private correctionInput!: HTMLInputElement;
  private feedbackButton!: HTMLButtonElement;
  private feedbackStatus!: HTMLElement;
  private feedbackError!: HTMLElement;

  // dashboard
  private dashboardMsg!: HTMLElement;
  private metricsBox!: HTMLElement;
  private timesBox!: HTMLElement;

  // settings
  private baseUrlInput!: HTMLInputElement;

  private askSection!: HTMLElement;
  private dashboardSection!: HTMLElement;
  private tabButtons = new Map<UiState["tab"], HTMLButtonElement>();

  constructor(root: HTMLElement, client: QaClient, storage: Storage) {
    this.root = root;
    this.client = client;
    this.storage = storage;
    this.state = loadState(storage);
    this.client.setBaseUrl(this.state.baseUrl);
  }

  start(): void {
    this.build();
    this.restore();
    if (this.state.tab === "dashboard") {
      void this.refreshDashboard();
    }
  }

  private commit(): void {
    saveState(this.storage, this.state);
  }

  // --- DOM construction -------------------------------------------------

  private build(): void {
    this.root.replaceChildren();

    const header = el("header", { class: "app-header" });
    header.appendChild(el("h1", {}, "fedread"));
    const nav = el("nav", { class: "tabs" });
    for (const tab of ["ask", "dashboard"] as const) {
      const btn = el("button", { id: `tab-${tab}`, type: "button" }, tab === "ask" ? "Ask" : "Dashboard");
      btn.addEventListener("click", () => this.switchTab(tab));
      this.tabButtons.set(tab, btn);
      nav.appendChild(btn);
    }
    header.appendChild(nav);
    this.root.appendChild(header);

    this.askSection = this.buildAskSection();
    this.dashboardSection = this.buildDashboardSection();
    this.root.appendChild(this.askSection);
    this.root.appendChild(this.dashboardSection);
    this.root.appendChild(this.buildSettings());
  }

  private buildAskSection(): HTMLElement {
    const section = el("section", { id: "ask-view" });

    const contextLabel = el("label", { for: "context" }, "Context");
    this.contextInput = el("textarea", { id: "context", rows: "8", placeholder: "Paste a passage here" });
    const questionLabel = el("label", { for: "question" }, "Question");
    this.questionInput = el("input", { id: "question", type: "text", placeholder: "Ask about the passage" });
    this.askButton = el("button", { id: "ask-btn", type: "button" }, "Ask");
    this.askError = el("div", { id: "ask-error", class: "error-banner", hidden: "" });

    this.questionInput.addEventListener("input", () => this.syncAskButton());
    this.askButton.addEventListener("click", () => void this.submitAsk());
    this.questionInput.addEventListener("keydown", (ev) => {
      if (ev.key === "Enter") {
        void this.submitAsk();
      }
    });

    this.answerPanel = el("div", { id: "answer-panel", hidden: "" });
    this.answerText = el("span", { id: "answer-text" });
    this.answerScore = el("span", { id: "answer-score" });
    const answerLine = el("p", { class: "answer-line" });
    answerLine.append("Answer: ", this.answerText, " ", this.answerScore);
    this.highlightBox = el("div", { id: "context-highlight", class: "context-box" });

    this.correctionInput = el("input", {
      id: "correction",
      type: "text",
      placeholder: "Correct answer (leave empty to accept)",
    });
    this.feedbackButton = el("button", { id: "feedback-btn", type: "button" }, "Send feedback");
    this.feedbackStatus = el("div", { id: "feedback-status", hidden: "" });
    this.feedbackError = el("div", { id: "feedback-error", class: "error-banner", hidden: "" });
    this.feedbackButton.addEventListener("click", () => void this.submitFeedback());

    const feedbackBlock = el("div", { id: "feedback-block" });
    feedbackBlock.append(
      el("h2", {}, "Feedback"),
      this.correctionInput,
      this.feedbackButton,
      this.feedbackStatus,
      this.feedbackError,
    );

    this.answerPanel.append(answerLine, this.highlightBox, feedbackBlock);

    section.append(
      contextLabel,
      this.contextInput,
      questionLabel,
      this.questionInput,
      this.askButton,
      this.askError,
      this.answerPanel,
    );
    return section;
  }

  private buildDashboardSection(): HTMLElement {
    const section = el("section", { id: "dashboard-view", hidden: "" });
    const refresh = el("button", { id: "rounds-refresh", type: "button" }, "Refresh");
    refresh.addEventListener("click", () => void this.refreshDashboard());
    this.dashboardMsg = el("div", { id: "dashboard-msg", hidden: "" });
    this.metricsBox = el("div", { id: "metrics-chart" });
    this.timesBox = el("div", { id: "times-chart" });
    section.append(
      el("h2", {}, "Session convergence"),
      refresh,
      this.dashboardMsg,
      this.metricsBox,
      this.timesBox,
    );
    return section;
  }

  private buildSettings(): HTMLElement {
    const section = el("section", { id: "settings", class: "settings" });
    const label = el("label", { for: "base-url" }, "Service URL");
    this.baseUrlInput = el("input", { id: "base-url", type: "text" });
    this.baseUrlInput.addEventListener("change", () => {
      this.state.baseUrl = this.baseUrlInput.value;
      this.client.setBaseUrl(this.state.baseUrl);
      this.commit();
    });
    section.append(label, this.baseUrlInput);
    return section;
  }

  // --- state restore ----------------------------------------------------

  private restore(): void {
    this.contextInput.value = this.state.context;
    this.questionInput.value = this.state.question;
    this.baseUrlInput.value = this.state.baseUrl;
    if (this.state.answer !== null) {
      this.renderAnswer(this.state.answer);
      if (this.state.feedbackId !== null) {
        this.showFeedbackId(this.state.feedbackId);
      }
    }
    this.applyTab();
    this.syncAskButton();
  }

  private switchTab(tab: UiState["tab"]): void {
    if (this.state.tab === tab) {
      return;
    }
    this.state.tab = tab;
    this.commit();
    this.applyTab();
    if (tab === "dashboard") {
      void this.refreshDashboard();
    }
  }

  private applyTab(): void {
    this.askSection.hidden = this.state.tab !== "ask";
    this.dashboardSection.hidden = this.state.tab !== "dashboard";
    for (const [tab, btn] of this.tabButtons) {
      btn.classList.toggle("active", tab === this.state.tab);
    }
  }

  // --- ask flow -----------------------------------------------------------

  private syncAskButton(): void {
    this.askButton.disabled = this.askInFlight || this.questionInput.value.trim() === "";
  }

  async submitAsk(): Promise<void> {
    if (this.askInFlight || this.questionInput.value.trim() === "") {
      return;
    }
    this.askInFlight = true;
    this.syncAskButton();
    this.askError.hidden = true;
    this.askError.textContent = "";

    const context = this.contextInput.value;
    const question = this.questionInput.value;
    try {
      const answer = await this.client.ask({ context, question });
      // commit only on success; a failed ask leaves the previous answer
      // panel and the typed inputs untouched
      this.state.context = context;
      this.state.question = question;
      this.state.answer = answer;
      this.state.feedbackId = null;
      this.commit();
      this.renderAnswer(answer);
    } catch (err) {
      this.askError.textContent = describeError(err);
      this.askError.hidden = false;
    } finally {
      this.askInFlight = false;
      this.syncAskButton();
    }
  }

  private renderAnswer(answer: Answer): void {
    this.answerText.textContent = answer.text;
    this.answerScore.textContent = `(score ${answer.score})`;
    renderHighlight(this.highlightBox, this.state.context, answer.char_start, answer.char_end);
    this.correctionInput.value = "";
    this.correctionInput.placeholder = `Correct answer (empty accepts "${answer.text}")`;
    this.feedbackStatus.hidden = true;
    this.feedbackStatus.textContent = "";
    this.feedbackError.hidden = true;
    this.feedbackError.textContent = "";
    this.feedbackButton.disabled = false;
    this.answerPanel.hidden = false;
  }

  // --- feedback flow ------------------------------------------------------

  async submitFeedback(): Promise<void> {
    const answer = this.state.answer;
    if (answer === null || this.feedbackInFlight) {
      return;
    }
    // flip the flag before the first await: a second click during the
    // request must not start another POST
    this.feedbackInFlight = true;
    this.feedbackButton.disabled = true;
    this.feedbackError.hidden = true;
    this.feedbackError.textContent = "";

    try {
      const ack = await this.client.feedback({
        question: this.state.question,
        context_id: contextId(this.state.context),
        pred_start: answer.token_start,
        pred_end: answer.token_end,
        pred_text: answer.text,
        correction: this.correctionInput.value,
      });
      this.state.feedbackId = ack.id;
      this.commit();
      this.showFeedbackId(ack.id);
    } catch (err) {
      this.feedbackError.textContent = describeError(err);
      this.feedbackError.hidden = false;
      this.feedbackButton.disabled = false;
    } finally {
      this.feedbackInFlight = false;
    }
  }

  private showFeedbackId(id: string): void {
    this.feedbackStatus.textContent = `stored as ${id}`;
    this.feedbackStatus.hidden = false;
    // one answer, one record; a fresh ask re-enables the button
    this.feedbackButton.disabled = true;
  }

  // --- dashboard ----------------------------------------------------------

  async refreshDashboard(): Promise<void> {
    this.dashboardMsg.hidden = true;
    this.dashboardMsg.textContent = "";
    try {
      const records = await this.client.rounds();
      if (records.length === 0) {
        this.metricsBox.replaceChildren();
        this.timesBox.replaceChildren();
        this.dashboardMsg.textContent = "no sessions yet";
        this.dashboardMsg.hidden = false;
        return;
      }
      renderMetricsChart(this.metricsBox, records);
      renderTimesChart(this.timesBox, records);
    } catch (err) {
      this.metricsBox.replaceChildren();
      this.timesBox.replaceChildren();
      this.dashboardMsg.textContent = describeError(err);
      this.dashboardMsg.hidden = false;
    }
  }
}

export function createApp(root: HTMLElement, client: QaClient, storage?: Storage): App {
  const app = new App(root, client, storage ?? window.localStorage);
  app.start();
  return app;
}

export { defaultState };
