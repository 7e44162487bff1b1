import { vi } from "vitest";
import { QaClient } from "../src/api.js";
import { createApp, type App } from "../src/app.js";
import { defaultState, saveState } from "../src/store.js";
import type { Answer, RoundRecord } from "../src/types.js";

export const BASE = "http://svc.test";

export const APOLLO_CONTEXT =
  "The Apollo program was the third United States human spaceflight program. " +
  "The first crewed flight took place in 1968 and the program ran until 1972.";

export const APOLLO_QUESTION = "What year did the first manned Apollo flight occur?";

export function apolloAnswer(): Answer {
  const start = APOLLO_CONTEXT.indexOf("1968");
  return {
    text: "1968",
    char_start: start,
    char_end: start + 4,
    token_start: 21,
    token_end: 21,
    score: 0.42,
  };
}

export function fiveRounds(): RoundRecord[] {
  const mk = (round: number, em: number, f1: number, wall: number): RoundRecord => ({
    round,
    participants: ["client_1", "client_2"],
    n_total: 80,
    aggregate_digest: `d${round}`,
    val_em: em,
    val_f1: f1,
    wall_time: wall,
  });
  // deliberately awkward floats: the verbatim data-value check must not
  // survive any rounding on the way to the DOM
  return [
    mk(1, 0.15, 0.2500000000000001, 1.25),
    mk(2, 0.35, 0.41, 0.9),
    mk(3, 0.55, 0.6099999999999999, 1.0),
    mk(4, 0.7, 0.78, 1.1),
    mk(5, 0.85, 0.9, 0.95),
  ];
}

export type FetchCall = { url: string; init: RequestInit | undefined };

export type RouteResult = { status: number; body: unknown };

export type RouteHandler = (
  url: string,
  init: RequestInit | undefined,
) => RouteResult | Promise<RouteResult>;

/** Replace global fetch with a recording stub backed by `handler`. */
export function stubFetch(handler: RouteHandler): { calls: FetchCall[] } {
  const calls: FetchCall[] = [];
  vi.stubGlobal(
    "fetch",
    vi.fn(async (url: string, init?: RequestInit) => {
      calls.push({ url, init });
      const { status, body } = await handler(url, init);
      return {
        ok: status >= 200 && status < 300,
        status,
        json: async () => body,
      } as Response;
    }),
  );
  return { calls };
}

export function postedBody(call: FetchCall): Record<string, unknown> {
  return JSON.parse(String(call.init?.body)) as Record<string, unknown>;
}

export function memStorage(): Storage {
  const map = new Map<string, string>();
  const store = {
    get length() {
      return map.size;
    },
    clear: () => map.clear(),
    getItem: (k: string) => map.get(k) ?? null,
    key: (i: number) => [...map.keys()][i] ?? null,
    removeItem: (k: string) => {
      map.delete(k);
    },
    setItem: (k: string, v: string) => {
      map.set(k, String(v));
    },
  };
  return store as Storage;
}

/** Mount a fresh app against BASE; reuse `storage` to simulate a reload. */
export function mountApp(storage?: Storage): { app: App; storage: Storage } {
  const store = storage ?? seededStorage();
  document.body.innerHTML = '<div id="app"></div>';
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("mount point missing");
  }
  const app = createApp(root, new QaClient(BASE), store);
  return { app, storage: store };
}

export function seededStorage(): Storage {
  const store = memStorage();
  saveState(store, { ...defaultState(), baseUrl: BASE });
  return store;
}

export function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`no element #${id}`);
  }
  return node as T;
}

export function setValue(input: HTMLInputElement | HTMLTextAreaElement, value: string): void {
  input.value = value;
  input.dispatchEvent(new Event("input", { bubbles: true }));
}

/** Let pending promises and timers settle. */
export async function flush(): Promise<void> {
  for (let i = 0; i < 4; i += 1) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

/** Drive a successful ask so feedback tests start from a shown answer. */
export async function askApollo(app: App): Promise<void> {
  setValue(byId<HTMLTextAreaElement>("context"), APOLLO_CONTEXT);
  setValue(byId<HTMLInputElement>("question"), APOLLO_QUESTION);
  await app.submitAsk();
}
