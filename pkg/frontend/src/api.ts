// Thin fetch wrapper for the annotation service.

import type {
  ApiClient,
  DecisionBody,
  DecisionResponse,
  ExportPayload,
  NextResponse,
  Stats,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status?: number,
  ) {
    super(message);
  }
}

export class HttpApi implements ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchFn(this.url(path), init);
    } catch (err) {
      throw new ApiError(`network failure: ${String(err)}`);
    }
    const body = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const detail = (body as { error?: string }).error ?? resp.statusText;
      throw new ApiError(detail, resp.status);
    }
    return body as T;
  }

  nextCandidate(annotator: string): Promise<NextResponse> {
    return this.request<NextResponse>(
      `/api/candidate/next?annotator=${encodeURIComponent(annotator)}`,
    );
  }

  postDecision(body: DecisionBody): Promise<DecisionResponse> {
    return this.request<DecisionResponse>("/api/decision", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  stats(): Promise<Stats> {
    return this.request<Stats>("/api/stats");
  }

  exportSet(): Promise<ExportPayload> {
    return this.request<ExportPayload>("/api/export");
  }

  exportUrl(): string {
    return this.url("/api/export");
  }
}
