import type { Answer } from "./types.js";

// Committed UI state, persisted to localStorage so a reload lands back on
// the same view. Deliberately excludes anything in flight: a request that
// has not answered yet is not state worth keeping.

export const STORAGE_KEY = "fedread-ui-state-v1";

export const DEFAULT_BASE_URL = "http://127.0.0.1:8080";

export type UiState = {
  baseUrl: string;
  tab: "ask" | "dashboard";
  context: string;
  question: string;
  answer: Answer | null;
  feedbackId: string | null;
};

export function defaultState(): UiState {
  return {
    baseUrl: DEFAULT_BASE_URL,
    tab: "ask",
    context: "",
    question: "",
    answer: null,
    feedbackId: null,
  };
}

export function loadState(storage: Storage): UiState {
  const raw = storage.getItem(STORAGE_KEY);
  if (raw === null) {
    return defaultState();
  }
  try {
    const parsed = JSON.parse(raw) as Partial<UiState>;
    const base = defaultState();
    return {
      baseUrl: typeof parsed.baseUrl === "string" ? parsed.baseUrl : base.baseUrl,
      tab: parsed.tab === "dashboard" ? "dashboard" : "ask",
      context: typeof parsed.context === "string" ? parsed.context : base.context,
      question: typeof parsed.question === "string" ? parsed.question : base.question,
      answer: isAnswer(parsed.answer) ? parsed.answer : null,
      feedbackId: typeof parsed.feedbackId === "string" ? parsed.feedbackId : null,
    };
  } catch {
    return defaultState();
  }
}

export function saveState(storage: Storage, state: UiState): void {
  storage.setItem(STORAGE_KEY, JSON.stringify(state));
}

function isAnswer(value: unknown): value is Answer {
  if (typeof value !== "object" || value === null) {
    return false;
  }
  const a = value as Record<string, unknown>;
  return (
    typeof a.text === "string" &&
    typeof a.char_start === "number" &&
    typeof a.char_end === "number" &&
    typeof a.token_start === "number" &&
    typeof a.token_end === "number" &&
    typeof a.score === "number"
  );
}
