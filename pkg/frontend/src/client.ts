// Thin API client for the annotation service. Event posts carry idempotency
// keys and are retried on network failure without duplicating server state.

import type {
  BatchResponse,
  EditEvent,
  EventsResponse,
  FinalizeResponse,
  ImageState,
  NextItem,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public next: NextItem | null = null
  ) {
    super(message);
  }
}

export class AnnotationClient {
  private keySeq = 0;

  constructor(
    private base: string,
    private fetchImpl: FetchLike = fetch,
    private retries = 3
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(`${this.base}${path}`);
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as T;
  }

  nextBatch(worker: string): Promise<BatchResponse> {
    return this.getJson(`/batches/next?worker=${encodeURIComponent(worker)}`);
  }

  image(id: string, session?: string): Promise<ImageState> {
    const q = session ? `?session=${encodeURIComponent(session)}` : "";
    return this.getJson(`/images/${encodeURIComponent(id)}${q}`);
  }

  next(sessionId: string): Promise<NextItem> {
    return this.getJson(`/sessions/${encodeURIComponent(sessionId)}/next`);
  }

  newIdempotencyKey(): string {
    return `k${Date.now()}-${this.keySeq++}`;
  }

  /**
   * Post events; a network failure retries the identical payload (same
   * idempotency keys), so the server applies each event at most once. A 409
   * means the protocol rejected an event; the server's view of the next
   * item rides along for resynchronization.
   */
  async postEvents(sessionId: string, events: EditEvent[]): Promise<EventsResponse> {
    const body = JSON.stringify({ events });
    let lastError: unknown = null;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      try {
        const res = await this.fetchImpl(
          `${this.base}/sessions/${encodeURIComponent(sessionId)}/events`,
          { method: "POST", headers: { "content-type": "application/json" }, body }
        );
        if (res.status === 409) {
          const doc = (await res.json()) as { error: string; next: NextItem };
          throw new ApiError(409, doc.error, doc.next);
        }
        if (!res.ok) throw new ApiError(res.status, await res.text());
        return (await res.json()) as EventsResponse;
      } catch (err) {
        if (err instanceof ApiError) throw err;
        lastError = err; // network-level failure: retry the same payload
      }
    }
    throw lastError instanceof Error ? lastError : new Error("postEvents failed");
  }

  async finalize(sessionId: string): Promise<FinalizeResponse> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${encodeURIComponent(sessionId)}/finalize`,
      { method: "POST" }
    );
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as FinalizeResponse;
  }
}
