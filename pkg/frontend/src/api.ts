/** Thin typed client over the documented review endpoints. Every queue
 * mutation in the UI goes through postDecision; there is no other write
 * path. */

import type {
  Decision,
  DecisionPayload,
  DecisionResponse,
  QueuePage,
  ReviewItem,
  ReviewKind,
  StatsResponse,
} from "./types.js";

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

/** Cursor values are URL-safe base64 of the last item id (server opaque;
 * reproduced here only so "skip" can page past the current item). */
export function encodeCursor(itemId: string): string {
  return btoa(itemId).replace(/\+/g, "-").replace(/\//g, "_");
}

async function parseError(response: Response): Promise<ApiError> {
  try {
    const body = (await response.json()) as { code?: string; message?: string };
    return new ApiError(
      response.status,
      body.code ?? "unknown",
      body.message ?? response.statusText,
    );
  } catch {
    return new ApiError(response.status, "unknown", response.statusText);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) =>
      globalThis.fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) {
      throw await parseError(response);
    }
    return (await response.json()) as T;
  }

  async queue(
    kind: ReviewKind | null,
    limit = 1,
    cursor?: string,
  ): Promise<QueuePage> {
    const params = new URLSearchParams();
    if (kind) params.set("kind", kind);
    params.set("limit", String(limit));
    if (cursor) params.set("cursor", cursor);
    return this.request<QueuePage>(`/api/queue?${params.toString()}`);
  }

  async item(itemId: string): Promise<ReviewItem> {
    return this.request<ReviewItem>(
      `/api/items/${encodeURIComponent(itemId)}`,
    );
  }

  async postDecision(
    itemId: string,
    decision: Decision,
    payload?: DecisionPayload,
  ): Promise<DecisionResponse> {
    return this.request<DecisionResponse>(
      `/api/items/${encodeURIComponent(itemId)}/decision`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(payload ? { decision, payload } : { decision }),
      },
    );
  }

  async stats(): Promise<StatsResponse> {
    return this.request<StatsResponse>("/api/stats");
  }

  imageUrl(recordId: string): string {
    return `${this.baseUrl}/api/images/${recordId}`;
  }

  camUrl(recordId: string, classCode: string, alpha: number): string {
    // encodeURIComponent leaves parentheses alone; class codes carry them
    const code = encodeURIComponent(classCode)
      .replace(/\(/g, "%28")
      .replace(/\)/g, "%29");
    return `${this.baseUrl}/api/cam/${recordId}/${code}.png?alpha=${alpha}`;
  }

  /** Fetch a CAM overlay as a blob (observable, unlike bare <img> src). */
  async fetchCamOverlay(
    recordId: string,
    classCode: string,
    alpha: number,
  ): Promise<Blob> {
    const response = await this.fetchImpl(
      this.camUrl(recordId, classCode, alpha),
    );
    if (!response.ok) {
      throw await parseError(response);
    }
    return response.blob();
  }
}
