import type { Answer, AskRequest, FeedbackAck, FeedbackRequest, RoundRecord } from "./types.js";

/** Error carrying the HTTP status and the server's message, if it sent one. */
export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.name = "ApiError";
    this.status = status;
  }
}

async function errorFrom(res: Response): Promise<ApiError> {
  // The service replies {"error": "..."} on failures; fall back to the
  // bare status when the body is not that shape.
  try {
    const body = (await res.json()) as { error?: unknown };
    if (typeof body.error === "string" && body.error !== "") {
      return new ApiError(res.status, body.error);
    }
  } catch {
    // non-JSON body, use the generic message
  }
  return new ApiError(res.status, `HTTP ${res.status}`);
}

export class QaClient {
  private baseUrl: string;

  constructor(baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  setBaseUrl(baseUrl: string): void {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  getBaseUrl(): string {
    return this.baseUrl;
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await fetch(this.baseUrl + path, {
      headers: { Accept: "application/json" },
    });
    if (!res.ok) {
      throw await errorFrom(res);
    }
    return (await res.json()) as T;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const res = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json", Accept: "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) {
      throw await errorFrom(res);
    }
    return (await res.json()) as T;
  }

  ask(req: AskRequest): Promise<Answer> {
    return this.postJson<Answer>("/ask", req);
  }

  feedback(req: FeedbackRequest): Promise<FeedbackAck> {
    return this.postJson<FeedbackAck>("/feedback", req);
  }

  rounds(): Promise<RoundRecord[]> {
    return this.getJson<RoundRecord[]>("/rounds");
  }
}
