import { afterEach, describe, expect, it, vi } from "vitest";
import {
  APOLLO_CONTEXT,
  APOLLO_QUESTION,
  apolloAnswer,
  byId,
  flush,
  mountApp,
  postedBody,
  setValue,
  stubFetch,
} from "./helpers.js";

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("ask flow", () => {
  it("renders the answer and highlights the span the service returned", async () => {
    const answer = apolloAnswer();
    const { calls } = stubFetch(() => ({ status: 200, body: answer }));
    const { app } = mountApp();

    setValue(byId<HTMLTextAreaElement>("context"), APOLLO_CONTEXT);
    setValue(byId<HTMLInputElement>("question"), APOLLO_QUESTION);
    await app.submitAsk();

    expect(calls).toHaveLength(1);
    expect(calls[0]?.url).toContain("/ask");
    expect(postedBody(calls[0]!)).toEqual({
      context: APOLLO_CONTEXT,
      question: APOLLO_QUESTION,
    });

    expect(byId("answer-panel").hidden).toBe(false);
    expect(byId("answer-text").textContent).toBe("1968");
    expect(byId("answer-score").textContent).toContain("0.42");

    const mark = byId("context-highlight").querySelector("mark");
    expect(mark?.textContent).toBe("1968");
    // the whole context is shown with the span embedded at the service's
    // offsets, not re-found by searching
    expect(byId("context-highlight").textContent).toBe(APOLLO_CONTEXT);
    expect(mark?.previousSibling?.textContent?.length).toBe(answer.char_start);
  });

  it("disables submit while the question is empty", () => {
    stubFetch(() => ({ status: 200, body: apolloAnswer() }));
    mountApp();

    const btn = byId<HTMLButtonElement>("ask-btn");
    expect(btn.disabled).toBe(true);
    setValue(byId<HTMLInputElement>("question"), "   ");
    expect(btn.disabled).toBe(true);
    setValue(byId<HTMLInputElement>("question"), "why?");
    expect(btn.disabled).toBe(false);
    setValue(byId<HTMLInputElement>("question"), "");
    expect(btn.disabled).toBe(true);
  });

  it("shows a banner on network failure and preserves the form", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn(async () => {
        throw new TypeError("fetch failed");
      }),
    );
    const { app } = mountApp();

    setValue(byId<HTMLTextAreaElement>("context"), APOLLO_CONTEXT);
    setValue(byId<HTMLInputElement>("question"), APOLLO_QUESTION);
    await app.submitAsk();

    const banner = byId("ask-error");
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toContain("fetch failed");
    // no partial render: the answer panel never appeared
    expect(byId("answer-panel").hidden).toBe(true);
    // the typed inputs are still there for a retry
    expect(byId<HTMLTextAreaElement>("context").value).toBe(APOLLO_CONTEXT);
    expect(byId<HTMLInputElement>("question").value).toBe(APOLLO_QUESTION);
    expect(byId<HTMLButtonElement>("ask-btn").disabled).toBe(false);
  });

  it("shows the server's message on a 400", async () => {
    stubFetch(() => ({ status: 400, body: { error: "question too long" } }));
    const { app } = mountApp();

    setValue(byId<HTMLInputElement>("question"), "x".repeat(10));
    await app.submitAsk();

    const banner = byId("ask-error");
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toBe("question too long");
    expect(byId("answer-panel").hidden).toBe(true);
  });

  it("keeps a failed ask from clobbering the previous answer", async () => {
    let fail = false;
    stubFetch(() => {
      if (fail) {
        return { status: 500, body: { error: "model reload in progress" } };
      }
      return { status: 200, body: apolloAnswer() };
    });
    const { app } = mountApp();

    setValue(byId<HTMLTextAreaElement>("context"), APOLLO_CONTEXT);
    setValue(byId<HTMLInputElement>("question"), APOLLO_QUESTION);
    await app.submitAsk();
    expect(byId("answer-text").textContent).toBe("1968");

    fail = true;
    setValue(byId<HTMLInputElement>("question"), "another question?");
    await app.submitAsk();

    expect(byId("ask-error").hidden).toBe(false);
    // the old answer is still on screen, untouched
    expect(byId("answer-panel").hidden).toBe(false);
    expect(byId("answer-text").textContent).toBe("1968");
    expect(byId("context-highlight").querySelector("mark")?.textContent).toBe("1968");
  });

  it("sends at most one ask at a time", async () => {
    let release!: (r: { status: number; body: unknown }) => void;
    const gate = new Promise<{ status: number; body: unknown }>((resolve) => {
      release = resolve;
    });
    const { calls } = stubFetch(() => gate);
    const { app } = mountApp();

    setValue(byId<HTMLInputElement>("question"), "slow one?");
    const first = app.submitAsk();
    // button went down synchronously, so a click now does nothing
    expect(byId<HTMLButtonElement>("ask-btn").disabled).toBe(true);
    byId<HTMLButtonElement>("ask-btn").click();
    await app.submitAsk();

    release({ status: 200, body: apolloAnswer() });
    await first;
    await flush();

    expect(calls).toHaveLength(1);
  });
});
