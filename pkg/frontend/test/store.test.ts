import { describe, expect, it } from "vitest";
import { DEFAULT_BASE_URL, STORAGE_KEY, defaultState, loadState, saveState } from "../src/store.js";
import { apolloAnswer, memStorage } from "./helpers.js";

describe("ui state persistence", () => {
  it("round-trips a full state", () => {
    const store = memStorage();
    const state = {
      ...defaultState(),
      baseUrl: "http://elsewhere:9999",
      tab: "dashboard" as const,
      context: "some passage",
      question: "what?",
      answer: apolloAnswer(),
      feedbackId: "abc123",
    };
    saveState(store, state);
    expect(loadState(store)).toEqual(state);
  });

  it("returns defaults when nothing is stored", () => {
    const state = loadState(memStorage());
    expect(state).toEqual(defaultState());
    expect(state.baseUrl).toBe(DEFAULT_BASE_URL);
  });

  it("survives corrupt json", () => {
    const store = memStorage();
    store.setItem(STORAGE_KEY, "{not json");
    expect(loadState(store)).toEqual(defaultState());
  });

  it("drops fields of the wrong shape instead of crashing", () => {
    const store = memStorage();
    store.setItem(
      STORAGE_KEY,
      JSON.stringify({ baseUrl: 7, tab: "bogus", answer: { text: "x" }, feedbackId: 3 }),
    );
    const state = loadState(store);
    expect(state.baseUrl).toBe(DEFAULT_BASE_URL);
    expect(state.tab).toBe("ask");
    expect(state.answer).toBeNull();
    expect(state.feedbackId).toBeNull();
  });
});
